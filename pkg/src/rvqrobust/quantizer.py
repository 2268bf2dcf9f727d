"""Single-stage VQ (nearest and probabilistic top-K) and the residual cascade."""

from __future__ import annotations

import enum
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .codebook import Codebook

RVQ_MAGIC = b"RVQR"
RVQ_FORMAT_VERSION = 1

DEFAULT_K = 10
DEFAULT_TEMPERATURE = 5.0


class Mode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    PROBABILISTIC_TOP_K = "probabilistic_top_k"


@dataclass(frozen=True)
class QuantizerConfig:
    """How each stage picks its codeword.

    ``perturbed_stage`` is 1-based. A sequence of several stages can be
    stored but ``validate`` rejects it: exactly one stage is sampled per pass.
    """

    mode: Mode = Mode.DETERMINISTIC
    k: int = DEFAULT_K
    temperature: float = DEFAULT_TEMPERATURE
    perturbed_stage: int | tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.mode is Mode.DETERMINISTIC and self.perturbed_stage is not None:
            raise ValueError("deterministic mode takes no perturbed_stage")

    def stage(self, n_stages: int) -> int | None:
        """Validate against an N-stage cascade and return the perturbed stage."""
        if self.mode is Mode.DETERMINISTIC:
            return None
        l = self.perturbed_stage
        if isinstance(l, (tuple, list)):
            if len(l) != 1:
                raise ValueError(f"exactly one stage may be perturbed per pass, got {tuple(l)}")
            l = l[0]
        if l is None or not 1 <= int(l) <= n_stages:
            raise ValueError(f"perturbed_stage must be in [1, {n_stages}], got {l}")
        return int(l)

    def to_dict(self) -> dict:
        l = self.perturbed_stage
        return {
            "mode": self.mode.value,
            "k": self.k,
            "temperature": self.temperature,
            "perturbed_stage": list(l) if isinstance(l, tuple) else l,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerConfig":
        l = d.get("perturbed_stage")
        return cls(
            Mode(d.get("mode", Mode.DETERMINISTIC)),
            int(d.get("k", DEFAULT_K)),
            float(d.get("temperature", DEFAULT_TEMPERATURE)),
            tuple(l) if isinstance(l, list) else l,
        )


@dataclass(frozen=True)
class CandidateList:
    """The min(K, M) nearest entries, ascending by distance then by index."""

    indices: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass
class QuantizationResult:
    """Trace of one cascade pass.

    ``residuals`` has N + 1 rows: row 0 is the input z and row n is what is
    left after stage n, so row n - 1 is the input seen by stage n.
    """

    indices: list[int]
    quantized: np.ndarray
    residuals: np.ndarray
    sampled_stage: int | None = None


@dataclass
class BatchQuantization:
    """Batched counterpart of QuantizationResult: indices (B, N), quantized (B, D), residuals (B, N+1, D)."""

    indices: np.ndarray
    quantized: np.ndarray
    residuals: np.ndarray
    sampled_stage: int | None = None

    def __getitem__(self, i) -> QuantizationResult:
        return QuantizationResult(
            [int(v) for v in self.indices[i]], self.quantized[i], self.residuals[i], self.sampled_stage
        )

    def __len__(self):
        return self.indices.shape[0]


def _check_vector(z, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (dim,):
        raise ValueError(f"expected a vector of dimension {dim}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("input vector has non-finite entries")
    return z


def distances(z, entries: np.ndarray) -> np.ndarray:
    """Euclidean (non-squared) distance from z (D,) or (B, D) to every entry."""
    diff = z[..., None, :] - entries
    return np.sqrt(np.einsum("...md,...md->...m", diff, diff))


def nearest_codeword(z, codebook: Codebook) -> tuple[int, float]:
    z = _check_vector(z, codebook.dim)
    d = distances(z, codebook.entries)
    j = int(np.argmin(d))
    return j, float(d[j])


def _clamp_k(k: int, M: int) -> int:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > M:
        warnings.warn(f"k={k} exceeds codebook size {M}; clamping to {M}", stacklevel=3)
        return M
    return k


def top_k_candidates(z, codebook: Codebook, k: int) -> CandidateList:
    z = _check_vector(z, codebook.dim)
    k = _clamp_k(k, codebook.size)
    d = distances(z, codebook.entries)
    order = np.argsort(d, kind="stable")[:k]
    return CandidateList(order, d[order])


def sampling_distribution(candidates: CandidateList | np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of -d/temperature over the candidate distances.

    The minimum distance is subtracted before exponentiating; this does not
    change the result and keeps tiny temperatures from underflowing.
    """
    d = np.asarray(getattr(candidates, "distances", candidates), dtype=np.float64)
    if d.shape[-1] == 0:
        raise ValueError("candidate list is empty")
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    w = np.exp(-(d - d.min(axis=-1, keepdims=True)) / temperature)
    return w / w.sum(axis=-1, keepdims=True)


def _inverse_cdf(probs: np.ndarray, u) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    pos = np.sum(cdf <= np.asarray(u)[..., None] * cdf[..., -1:], axis=-1)
    return np.minimum(pos, probs.shape[-1] - 1)


def sample_codeword(dist: np.ndarray, candidates: CandidateList, rng: np.random.Generator) -> int:
    """Categorical draw by inverse CDF over the candidate order. Consumes one uniform."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (len(candidates),):
        raise ValueError(f"distribution of length {dist.shape} does not match {len(candidates)} candidates")
    pos = int(_inverse_cdf(dist, rng.random()))
    return int(candidates.indices[pos])


@dataclass
class ResidualQuantizer:
    """Ordered cascade of N codebooks sharing one dimension."""

    stages: list[Codebook] = field(default_factory=list)

    def __post_init__(self):
        self.stages = list(self.stages)
        if not self.stages:
            raise ValueError("a residual quantizer needs at least one stage")
        dims = {cb.dim for cb in self.stages}
        if len(dims) != 1:
            raise ValueError(f"all stages must share one dimension, got {sorted(dims)}")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def dim(self) -> int:
        return self.stages[0].dim

    def copy(self) -> "ResidualQuantizer":
        return ResidualQuantizer([cb.copy() for cb in self.stages])

    def to_bytes(self) -> bytes:
        out = [RVQ_MAGIC, struct.pack("<II", RVQ_FORMAT_VERSION, self.n_stages)]
        for cb in self.stages:
            blob = cb.to_bytes()
            out.append(struct.pack("<Q", len(blob)))
            out.append(blob)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ResidualQuantizer":
        if blob[:4] != RVQ_MAGIC:
            raise ValueError("not a residual quantizer blob (bad magic)")
        version, n = struct.unpack_from("<II", blob, 4)
        if version != RVQ_FORMAT_VERSION:
            raise ValueError(f"unsupported residual quantizer format version {version}")
        off = 12
        stages = []
        for _ in range(n):
            (size,) = struct.unpack_from("<Q", blob, off)
            off += 8
            stages.append(Codebook.from_bytes(blob[off : off + size]))
            off += size
        if off != len(blob):
            raise ValueError("trailing bytes after residual quantizer stages")
        return cls(stages)


def rvq_encode(
    z, rvq: ResidualQuantizer, config: QuantizerConfig = QuantizerConfig(), rng: np.random.Generator | None = None
) -> QuantizationResult:
    """Quantize one vector through the cascade.

    Stage ``config.perturbed_stage`` (if any) draws its codeword from the
    distance-weighted top-K distribution; every other stage takes the nearest
    entry. Deterministic mode never touches ``rng``.
    """
    z = _check_vector(z, rvq.dim)
    l = config.stage(rvq.n_stages)
    if l is not None and rng is None:
        raise ValueError("probabilistic encoding needs an rng")
    quantized = np.zeros(rvq.dim)
    residual = z.copy()
    residuals = [residual.copy()]
    indices = []
    for n, cb in enumerate(rvq.stages, start=1):
        d = distances(residual, cb.entries)
        if n == l:
            k = _clamp_k(config.k, cb.size)
            order = np.argsort(d, kind="stable")[:k]
            cand = CandidateList(order, d[order])
            m = sample_codeword(sampling_distribution(cand, config.temperature), cand, rng)
        else:
            m = int(np.argmin(d))
        quantized = quantized + cb.entries[m]
        residual = residual - cb.entries[m]
        residuals.append(residual.copy())
        indices.append(m)
    return QuantizationResult(indices, quantized, np.array(residuals), l)


def rvq_encode_batch(
    Z, rvq: ResidualQuantizer, config: QuantizerConfig = QuantizerConfig(), rng: np.random.Generator | None = None
) -> BatchQuantization:
    """Vectorized ``rvq_encode`` over rows of Z.

    The sampled stage draws ``len(Z)`` uniforms from ``rng`` in one call,
    row i using the i-th; given those uniforms every row matches the
    single-vector path bit-for-bit.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != rvq.dim:
        raise ValueError(f"expected a (B, {rvq.dim}) batch, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("input batch has non-finite entries")
    l = config.stage(rvq.n_stages)
    if l is not None and rng is None:
        raise ValueError("probabilistic encoding needs an rng")
    B = Z.shape[0]
    quantized = np.zeros_like(Z)
    residual = Z.copy()
    residuals = np.empty((B, rvq.n_stages + 1, rvq.dim))
    residuals[:, 0] = residual
    indices = np.empty((B, rvq.n_stages), dtype=np.int64)
    rows = np.arange(B)
    for n, cb in enumerate(rvq.stages, start=1):
        d = distances(residual, cb.entries)
        if n == l:
            k = _clamp_k(config.k, cb.size)
            order = np.argsort(d, axis=1, kind="stable")[:, :k]
            probs = sampling_distribution(np.take_along_axis(d, order, axis=1), config.temperature)
            pos = _inverse_cdf(probs, rng.random(B))
            m = order[rows, pos]
        else:
            m = np.argmin(d, axis=1)
        chosen = cb.entries[m]
        quantized = quantized + chosen
        residual = residual - chosen
        residuals[:, n] = residual
        indices[:, n - 1] = m
    return BatchQuantization(indices, quantized, residuals, l)


def rvq_decode(indices: Sequence[int] | np.ndarray, rvq: ResidualQuantizer) -> np.ndarray:
    """Sum of the selected code vectors, accumulated in stage order.

    Accepts one index per stage, or a (B, N) array for a batch.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[-1] != rvq.n_stages:
        raise ValueError(f"expected {rvq.n_stages} indices per vector, got {idx.shape[-1]}")
    out = np.zeros(idx.shape[:-1] + (rvq.dim,))
    for n, cb in enumerate(rvq.stages):
        col = idx[..., n]
        if np.any(col < 0) or np.any(col >= cb.size):
            raise IndexError(f"stage {n + 1} index out of range [0, {cb.size})")
        out = out + cb.entries[col]
    return out


def write_tokens(path, indices: np.ndarray, frame_rate: float) -> None:
    """Row-major little-endian u32 token array plus a ``.json`` sidecar."""
    idx = np.asarray(indices)
    if idx.ndim != 2:
        raise ValueError("token array must be (frames, stages)")
    path = Path(path)
    path.write_bytes(idx.astype("<u4").tobytes())
    meta = {"n_stages": int(idx.shape[1]), "n_frames": int(idx.shape[0]), "frame_rate": float(frame_rate)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_tokens(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<u4")
    if data.size != meta["n_frames"] * meta["n_stages"]:
        raise ValueError("token file size does not match its sidecar")
    return data.reshape(meta["n_frames"], meta["n_stages"]).astype(np.int64), meta
