"""Codebook state, k-means initialization and EMA learning updates."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .rng import make_rng

MAGIC = b"RVQC"
FORMAT_VERSION = 1

DEFAULT_DECAY = 0.99
EMA_EPS = 1e-5
DEAD_CODE_THRESHOLD = 1e-2


class CodebookFormatError(ValueError):
    pass


@dataclass
class Codebook:
    """M code vectors of dimension D plus the EMA statistics that refit them.

    ``ema_counts`` and ``ema_sums`` are kept so that ``entries == ema_sums /
    ema_counts`` wherever counts are above ``EMA_EPS``. Index ``i`` always
    refers to row ``i`` of ``entries``.
    """

    entries: np.ndarray
    ema_counts: np.ndarray = None
    ema_sums: np.ndarray = None
    decay: float = DEFAULT_DECAY

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] < 1 or entries.shape[1] < 1:
            raise ValueError(f"codebook entries must be a non-empty (M, D) array, got shape {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise ValueError("codebook entries must be finite")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {self.decay}")
        self.entries = entries
        if self.ema_counts is None:
            self.ema_counts = np.ones(entries.shape[0])
        if self.ema_sums is None:
            self.ema_sums = entries * self.ema_counts[:, None]
        self.ema_counts = np.array(self.ema_counts, dtype=np.float64)
        self.ema_sums = np.array(self.ema_sums, dtype=np.float64)
        if self.ema_counts.shape != (self.size,) or self.ema_sums.shape != entries.shape:
            raise ValueError("EMA state shape does not match entries")
        if np.any(self.ema_counts < 0):
            raise ValueError("ema_counts must be nonnegative")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.entries.copy(), self.ema_counts.copy(), self.ema_sums.copy(), self.decay)

    def equals(self, other: "Codebook") -> bool:
        """Bitwise equality of entries and EMA state."""
        return (
            self.decay == other.decay
            and np.array_equal(self.entries, other.entries)
            and np.array_equal(self.ema_counts, other.ema_counts)
            and np.array_equal(self.ema_sums, other.ema_sums)
        )

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        """Little-endian binary: header, f32 entries, then f64 EMA counts and sums."""
        header = MAGIC + struct.pack("<IIId", FORMAT_VERSION, self.dim, self.size, self.decay)
        return (
            header
            + self.entries.astype("<f4").tobytes()
            + self.ema_counts.astype("<f8").tobytes()
            + self.ema_sums.astype("<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Codebook":
        head = 4 + struct.calcsize("<IIId")
        if len(blob) < head or blob[:4] != MAGIC:
            raise CodebookFormatError("not a codebook blob (bad magic)")
        version, dim, size, decay = struct.unpack_from("<IIId", blob, 4)
        if version != FORMAT_VERSION:
            raise CodebookFormatError(f"unsupported codebook format version {version}")
        expected = head + size * dim * 4 + size * 8 + size * dim * 8
        if len(blob) != expected:
            raise CodebookFormatError(f"codebook blob has {len(blob)} bytes, expected {expected}")
        off = head
        entries = np.frombuffer(blob, "<f4", size * dim, off).reshape(size, dim).astype(np.float64)
        off += size * dim * 4
        counts = np.frombuffer(blob, "<f8", size, off).astype(np.float64)
        off += size * 8
        sums = np.frombuffer(blob, "<f8", size * dim, off).reshape(size, dim).astype(np.float64)
        return cls(entries, counts, sums, decay)

    def to_json(self) -> str:
        """Lossless debug export (floats written with repr round-tripping)."""
        return json.dumps(
            {
                "format": "rvqc-json",
                "version": FORMAT_VERSION,
                "dim": self.dim,
                "size": self.size,
                "decay": self.decay,
                "entries": self.entries.tolist(),
                "ema_counts": self.ema_counts.tolist(),
                "ema_sums": self.ema_sums.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Codebook":
        obj = json.loads(text)
        if obj.get("format") != "rvqc-json":
            raise CodebookFormatError("not a codebook JSON export")
        return cls(
            np.asarray(obj["entries"], dtype=np.float64).reshape(obj["size"], obj["dim"]),
            np.asarray(obj["ema_counts"], dtype=np.float64),
            np.asarray(obj["ema_sums"], dtype=np.float64).reshape(obj["size"], obj["dim"]),
            obj["decay"],
        )


def _as_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        raise ValueError("feature list is empty")
    if x.ndim != 2:
        raise ValueError(f"features must be a list of equal-length vectors, got array of shape {x.shape}")
    return x


def assign(features: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Nearest-entry index per feature row; ties go to the lowest index."""
    d2 = np.empty((features.shape[0], entries.shape[0]))
    for start in range(0, features.shape[0], 4096):
        chunk = features[start : start + 4096]
        diff = chunk[:, None, :] - entries[None, :, :]
        d2[start : start + 4096] = np.einsum("bmd,bmd->bm", diff, diff)
    return np.argmin(d2, axis=1)


def quantization_error(features, entries) -> float:
    """Sum of squared distances from each feature to its nearest entry."""
    x = _as_features(features)
    idx = assign(x, entries)
    return float(np.sum((x - entries[idx]) ** 2))


def kmeans_plusplus(features: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding over distinct rows; returns an (M, D) copy of chosen features."""
    x = features
    first = int(rng.integers(x.shape[0]))
    centers = [x[first]]
    d2 = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, M):
        total = d2.sum()
        # every remaining distinct point has d2 > 0, so total > 0 while M <= distinct count
        u = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
        idx = min(idx, x.shape[0] - 1)
        while d2[idx] == 0.0:
            idx -= 1
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def lloyd(features: np.ndarray, centers: np.ndarray, max_iters: int, history: list | None = None) -> np.ndarray:
    """Lloyd iterations until the assignment stops changing or ``max_iters`` is hit.

    Clusters that lose all members keep their previous centroid.
    """
    centers = centers.copy()
    labels = assign(features, centers)
    if history is not None:
        history.append(float(np.sum((features - centers[labels]) ** 2)))
    for _ in range(max_iters):
        counts = np.bincount(labels, minlength=centers.shape[0])
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, features)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        new_labels = assign(features, centers)
        if history is not None:
            history.append(float(np.sum((features - centers[new_labels]) ** 2)))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers


def init_kmeans(features, M: int, max_iters: int = 50, seed: int = 0, decay: float = DEFAULT_DECAY) -> Codebook:
    """Build an M-entry codebook with k-means++ seeding and Lloyd refinement.

    Args:
        features: (n, D) training vectors.
        M: number of code vectors; must not exceed the number of distinct rows.
        max_iters: cap on Lloyd iterations.
        seed: drives the k-means++ draws; the result depends on nothing else.
        decay: EMA decay stored on the returned codebook.

    Returns:
        Codebook whose EMA state is initialized to unit counts.
    """
    x = _as_features(features)
    if M < 1:
        raise ValueError(f"M must be positive, got {M}")
    distinct = np.unique(x, axis=0).shape[0]
    if M > distinct:
        raise ValueError(f"M={M} exceeds the number of distinct feature vectors ({distinct})")
    centers = kmeans_plusplus(x, M, make_rng(seed))
    centers = lloyd(x, centers, max_iters)
    return Codebook(centers, decay=decay)


def ema_update(codebook: Codebook, features, assignments, eps: float = EMA_EPS) -> Codebook:
    """One exponential-moving-average refit step.

    counts <- decay*counts + (1-decay)*n_i and sums <- decay*sums + (1-decay)*sum_i,
    then entry_i <- sums_i / max(counts_i, eps). Entries whose decayed count has
    fallen to eps or below keep their previous value instead of collapsing to
    the origin.
    """
    x = np.asarray(features, dtype=np.float64)
    idx = np.asarray(assignments, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise ValueError(f"features must have shape (n, {codebook.dim}), got {x.shape}")
    if idx.shape != (x.shape[0],):
        raise ValueError("assignments and features differ in length")
    if idx.size and (idx.min() < 0 or idx.max() >= codebook.size):
        raise IndexError(f"assignment index out of range [0, {codebook.size})")
    decay = codebook.decay
    n = np.bincount(idx, minlength=codebook.size).astype(np.float64)
    sums = np.zeros_like(codebook.entries)
    np.add.at(sums, idx, x)
    counts = decay * codebook.ema_counts + (1.0 - decay) * n
    ema_sums = decay * codebook.ema_sums + (1.0 - decay) * sums
    live = counts > eps
    entries = codebook.entries.copy()
    entries[live] = ema_sums[live] / np.maximum(counts[live], eps)[:, None]
    return Codebook(entries, counts, ema_sums, decay)


def reseed_dead_codes(
    codebook: Codebook, features, threshold: float = DEAD_CODE_THRESHOLD, seed: int = 0
) -> tuple[Codebook, int]:
    """Replace entries whose EMA count is below ``threshold`` with seeded batch samples.

    A reseeded entry restarts with unit count so it is not immediately reseeded again.
    """
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    dead = np.flatnonzero(codebook.ema_counts < threshold)
    if dead.size == 0:
        return codebook.copy(), 0
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        raise ValueError(f"{dead.size} dead codes but the feature batch is empty")
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise ValueError(f"features must have shape (n, {codebook.dim}), got {x.shape}")
    picks = make_rng(seed).integers(0, x.shape[0], size=dead.size)
    out = codebook.copy()
    out.entries[dead] = x[picks]
    out.ema_counts[dead] = 1.0
    out.ema_sums[dead] = x[picks]
    return out, int(dead.size)
