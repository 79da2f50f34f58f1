"""Datasets: a seeded synthetic marker task and a tab-separated text format."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError

PAD_ID = 0
UNK_ID = 1


@dataclass
class ToyDataset:
    """Token ids (N, T) padded with PAD_ID, validity mask (N, T), labels (N,)."""

    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if not (len(self.tokens) == len(self.mask) == len(self.labels)):
            raise ConfigError("tokens, mask and labels must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ToyDataset":
        return ToyDataset(self.tokens[idx], self.mask[idx], self.labels[idx], self.num_classes)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator["ToyDataset"]:
        """Yield mini-batches; shuffled when ``rng`` is given, in order otherwise."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(order), batch_size):
            yield self.subset(order[i:i + batch_size])

    def split(self, fractions: dict[str, float], seed: int = 0) -> dict[str, "ToyDataset"]:
        total = sum(fractions.values())
        if not np.isclose(total, 1.0):
            raise ConfigError(f"split fractions sum to {total}, expected 1")
        order = np.random.default_rng(seed).permutation(len(self))
        out, start = {}, 0
        names = list(fractions)
        for j, name in enumerate(names):
            stop = len(self) if j == len(names) - 1 else start + int(round(fractions[name] * len(self)))
            out[name] = self.subset(np.sort(order[start:stop]))
            start = stop
        return out


def make_synthetic(
    n: int,
    seq_len: int,
    vocab_size: int,
    seed: int = 0,
    task: str = "order",
    num_classes: int = 2,
    min_len: int | None = None,
    label_noise: float = 0.0,
) -> ToyDataset:
    """Seeded token-pattern classification.

    Ids 0 and 1 are PAD/UNK; ids from 2 are markers, the rest are filler.

    * ``order``: markers X=2 and Y=3 each appear once; label 1 iff X precedes Y.
    * ``presence``: exactly one of ``num_classes`` markers appears; it is the label.

    ``label_noise`` flips that fraction of labels uniformly to another class,
    capping the achievable accuracy at 1 - label_noise.
    """
    if task == "order":
        num_classes = 2
        n_markers = 2
    elif task == "presence":
        n_markers = num_classes
    else:
        raise ConfigError(f"unknown synthetic task {task!r}")
    first_filler = 2 + n_markers
    if vocab_size <= first_filler:
        raise ConfigError("vocab too small for the synthetic task")
    min_len = seq_len if min_len is None else min_len
    if not 2 <= min_len <= seq_len:
        raise ConfigError("need 2 <= min_len <= seq_len")
    rng = np.random.default_rng(seed)
    lengths = rng.integers(min_len, seq_len + 1, size=n)
    tokens = rng.integers(first_filler, vocab_size, size=(n, seq_len))
    mask = np.arange(seq_len)[None, :] < lengths[:, None]
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        pos = rng.choice(lengths[i], size=2, replace=False)
        if task == "order":
            tokens[i, pos[0]] = 2
            tokens[i, pos[1]] = 3
            labels[i] = int(pos[0] < pos[1])
        else:
            c = rng.integers(num_classes)
            tokens[i, pos[0]] = 2 + c
            labels[i] = c
    flip = rng.random(n) < label_noise
    shift = rng.integers(1, num_classes, size=n)
    labels = np.where(flip, (labels + shift) % num_classes, labels)
    tokens = np.where(mask, tokens, PAD_ID)
    return ToyDataset(tokens.astype(np.int64), mask, labels, num_classes)


def load_vocab(path: str | Path) -> dict[str, int]:
    """One token per line; ids are assigned after the reserved PAD/UNK."""
    words = [w.strip() for w in Path(path).read_text(encoding="utf-8").splitlines() if w.strip()]
    return {w: i + 2 for i, w in enumerate(dict.fromkeys(words))}


def load_tsv(path: str | Path, vocab: dict[str, int], max_seq_len: int, num_classes: int) -> ToyDataset:
    """Read ``space separated tokens<TAB>label`` lines; long sequences are truncated."""
    rows, labels = [], []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read data file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            words, label = line.rsplit("\t", 1)
            labels.append(int(label))
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: expected 'tokens<TAB>label'") from None
        rows.append([vocab.get(w, UNK_ID) for w in words.split()][:max_seq_len])
    if not rows:
        raise ConfigError(f"{path}: no examples")
    tokens = np.full((len(rows), max_seq_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), max_seq_len), dtype=bool)
    for i, r in enumerate(rows):
        tokens[i, :len(r)] = r
        mask[i, :len(r)] = True
    return ToyDataset(tokens, mask, np.asarray(labels, dtype=np.int64), num_classes)
