"""Parallel corpora, visual feature stores and padded batches."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .vocab import EOS, PAD, Vocabulary

MAGIC = b"MMTF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBII")


class DataFormatError(ValueError):
    pass


class AlignmentError(IndexError):
    pass


# ---------------------------------------------------------------------------
# text corpora


def read_lines(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [ln.split() for ln in lines]


def write_lines(path, sentences: Sequence[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


@dataclass
class ParallelCorpus:
    src: list[list[str]]
    tgt: list[list[str]]

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise DataFormatError(
                f"source and target differ in line count ({len(self.src)} vs {len(self.tgt)})"
            )

    def __len__(self) -> int:
        return len(self.src)

    @classmethod
    def load(cls, src_path, tgt_path) -> "ParallelCorpus":
        return cls(read_lines(src_path), read_lines(tgt_path))

    def save(self, src_path, tgt_path) -> None:
        write_lines(src_path, self.src)
        write_lines(tgt_path, self.tgt)

    def subset(self, idx: Sequence[int]) -> "ParallelCorpus":
        return ParallelCorpus([self.src[i] for i in idx], [self.tgt[i] for i in idx])


# ---------------------------------------------------------------------------
# visual features


def normalize_features(x: np.ndarray) -> np.ndarray:
    """Affine rescaling of a whole store into [0, 1].

    The lower anchor is min(0, min x), so nonnegative stores are only
    divided by their maximum (zero rows stay zero) and the map is idempotent.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    lo = min(0.0, float(x.min()))
    span = float(x.max()) - lo
    if span <= 0:
        return np.zeros_like(x)
    return np.clip((x - lo) / span, 0.0, 1.0)


class FeatureStore:
    """n × d matrix of per-sentence visual feature vectors."""

    def __init__(self, features: np.ndarray, normalize: bool = True):
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            raise DataFormatError(f"feature matrix must be 2-D, got shape {feats.shape}")
        if feats.shape[0] == 0:
            raise DataFormatError("feature store is empty (n = 0)")
        if not np.isfinite(feats).all():
            raise DataFormatError("feature store contains non-finite values")
        self.features = normalize_features(feats) if normalize else feats

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def rows(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise AlignmentError(f"feature index out of range [0, {self.n})")
        return self.features[idx]

    def subset(self, idx: Sequence[int]) -> "FeatureStore":
        return FeatureStore(self.rows(idx), normalize=False)

    def save(self, path) -> None:
        save_features(path, self.features)


def save_features(path, features: np.ndarray) -> None:
    feats = np.asarray(features, dtype="<f4")
    n, d = feats.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, d))
        fh.write(np.ascontiguousarray(feats).tobytes())


def load_features(path, normalize: bool = True) -> FeatureStore:
    """Read an ``MMTF`` feature file (magic, version byte, n, d, n·d float32 LE)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header at byte {len(raw)}")
    magic, version, n, d = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at byte 4")
    if n == 0:
        raise DataFormatError(f"{path}: empty store (n = 0) at byte 5")
    if d == 0:
        raise DataFormatError(f"{path}: zero feature dimension at byte 9")
    need = _HEADER.size + 4 * n * d
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated payload, expected {need} bytes, file ends at byte {len(raw)}")
    if len(raw) > need:
        raise DataFormatError(f"{path}: {len(raw) - need} trailing bytes after offset {need}")
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(feats))
    if bad.size:
        raise DataFormatError(f"{path}: non-finite value at byte {_HEADER.size + 4 * int(bad[0])}")
    return FeatureStore(feats.reshape(n, d), normalize=normalize)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray        # (B, Ts) int, PAD-filled
    tgt: np.ndarray        # (B, Tt) int, ends with EOS, PAD-filled
    src_mask: np.ndarray   # (B, Ts) float 0/1
    tgt_mask: np.ndarray   # (B, Tt) float 0/1
    feats: np.ndarray      # (B, d)
    indices: np.ndarray    # (B,) corpus indices

    def __len__(self) -> int:
        return len(self.indices)


def pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def encode_corpus(corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    src = [src_vocab.encode(s) for s in corpus.src]
    tgt = [tgt_vocab.encode(t, add_eos=True) for t in corpus.tgt]
    for i, s in enumerate(src):
        if not s:
            raise DataFormatError(f"empty source sentence at line {i + 1}")
    return src, tgt


def make_batch(src_ids, tgt_ids, features: FeatureStore, idx) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    s, sm = pad([src_ids[i] for i in idx])
    t, tm = pad([tgt_ids[i] for i in idx])
    return Batch(s, t, sm, tm, features.rows(idx), idx)


def make_batches(
    src_ids: Sequence[Sequence[int]],
    tgt_ids: Sequence[Sequence[int]],
    features: FeatureStore,
    batch_size: int = 32,
    shuffle_seed: int | None = 0,
) -> list[Batch]:
    """One epoch of length-bucketed batches.

    Examples are shuffled, stably sorted by source length and cut into
    consecutive batches; the batch order is then shuffled.  With
    ``shuffle_seed=None`` the order is the unshuffled bucketing.
    """
    n = len(src_ids)
    if n != len(tgt_ids):
        raise AlignmentError("source and target id lists differ in length")
    if n > features.n:
        raise AlignmentError(f"corpus has {n} examples but feature store only {features.n} rows")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    order = rng.permutation(n) if rng is not None else np.arange(n)
    lengths = np.array([len(src_ids[i]) for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [make_batch(src_ids, tgt_ids, features, c) for c in chunks]
