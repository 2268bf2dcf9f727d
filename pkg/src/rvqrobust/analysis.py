"""Noise mixing, codeword-shift statistics and SI-SDR."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .codebook import Codebook
from .quantizer import _check_vector, distances, nearest_codeword, top_k_candidates
from .rng import make_rng

log = logging.getLogger(__name__)

SI_SDR_CAP_DB = 100.0
ACTIVITY_THRESHOLD_DBFS = -40.0
ACTIVITY_FRAME_S = 0.010
DEFAULT_K_MAX = 50


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("audio signal must be a non-empty mono sample sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio signal has non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.size


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioSignal) else np.asarray(x, dtype=np.float64)


# -- SNR mixing ----------------------------------------------------------------


def active_mask(samples: np.ndarray, sample_rate: int, threshold_dbfs: float = ACTIVITY_THRESHOLD_DBFS) -> np.ndarray:
    """Per-sample mask of 10 ms frames whose RMS reaches the activity threshold.

    Falls back to all samples when nothing is active, so a quiet but
    non-silent signal still gets a defined power.
    """
    hop = max(1, int(round(sample_rate * ACTIVITY_FRAME_S)))
    n = samples.size
    mask = np.zeros(n, dtype=bool)
    floor = 10.0 ** (threshold_dbfs / 20.0)
    for start in range(0, n, hop):
        seg = samples[start : start + hop]
        if np.sqrt(np.mean(seg**2)) >= floor:
            mask[start : start + hop] = True
    if not mask.any():
        mask[:] = True
    return mask


def measure_snr(clean, noise_component, sample_rate: int | None = None) -> float:
    """SNR in dB of ``clean`` against the additive ``noise_component``, over active clean samples."""
    c = _samples(clean)
    v = _samples(noise_component)
    rate = sample_rate if sample_rate is not None else clean.sample_rate
    mask = active_mask(c, rate)
    return 10.0 * math.log10(np.mean(c[mask] ** 2) / np.mean(v[mask] ** 2))


def mix_at_snr(clean: AudioSignal, noise: AudioSignal, snr_db: float, seed: int = 0) -> AudioSignal:
    """Add a seeded excerpt of ``noise`` scaled so the mixture has the requested SNR.

    Powers are mean squares over the active (above -40 dBFS) part of the
    clean signal. The mixture is not renormalized; samples beyond [-1, 1]
    are logged as clipping and left in place.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(f"sample rate mismatch: {clean.sample_rate} vs {noise.sample_rate}")
    n = len(clean)
    if len(noise) < n:
        raise ValueError(f"noise ({len(noise)} samples) is shorter than clean ({n} samples)")
    c = clean.samples
    if not np.any(c):
        raise ValueError("clean signal is silent (zero power)")
    offset = int(make_rng(seed).integers(0, len(noise) - n + 1))
    excerpt = noise.samples[offset : offset + n]
    mask = active_mask(c, clean.sample_rate)
    p_clean = np.mean(c[mask] ** 2)
    p_noise = np.mean(excerpt[mask] ** 2)
    if p_noise == 0.0:
        raise ValueError("noise excerpt is silent over the active span")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = c + gain * excerpt
    clipped = int(np.count_nonzero(np.abs(mixed) > 1.0))
    if clipped:
        log.warning("mixture at %.1f dB SNR clips on %d samples", snr_db, clipped)
    return AudioSignal(mixed, clean.sample_rate)


# -- codeword shift --------------------------------------------------------------


class _Overflow:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "OVERFLOW"


OVERFLOW = _Overflow()


def codeword_shift(z_clean, z_noisy, codebook: Codebook, k_max: int = DEFAULT_K_MAX):
    """Rank (0-based) of the noisy vector's codeword among the clean vector's nearest candidates.

    Returns ``OVERFLOW`` when the noisy codeword is not within the clean
    vector's ``k_max`` nearest entries.
    """
    if k_max < 1:
        raise ValueError("k_max must be positive")
    z_clean = _check_vector(z_clean, codebook.dim)
    m_noisy, _ = nearest_codeword(z_noisy, codebook)
    cand = top_k_candidates(z_clean, codebook, min(k_max, codebook.size))
    hits = np.flatnonzero(cand.indices == m_noisy)
    return int(hits[0]) if hits.size else OVERFLOW


def codeword_shifts(Z_clean, Z_noisy, entries: np.ndarray, k_max: int = DEFAULT_K_MAX) -> np.ndarray:
    """Vectorized shifts; overflow is reported as -1.

    The rank of the noisy codeword m among the clean distances is the count
    of entries strictly closer, plus equally close entries with lower index.
    """
    Zc = np.asarray(Z_clean, dtype=np.float64)
    Zn = np.asarray(Z_noisy, dtype=np.float64)
    if Zc.shape != Zn.shape or Zc.ndim != 2 or Zc.shape[1] != entries.shape[1]:
        raise ValueError("clean and noisy batches must both be (n, D) with the codebook's D")
    out = np.empty(Zc.shape[0], dtype=np.int64)
    cols = np.arange(entries.shape[0])
    for s in range(0, Zc.shape[0], 2048):
        dc = distances(Zc[s : s + 2048], entries)
        m = np.argmin(distances(Zn[s : s + 2048], entries), axis=1)
        dm = dc[np.arange(dc.shape[0]), m][:, None]
        rank = np.sum((dc < dm) | ((dc == dm) & (cols[None, :] < m[:, None])), axis=1)
        out[s : s + 2048] = np.where(rank < k_max, rank, -1)
    return out


@dataclass
class ShiftHistogram:
    """Counts of codeword shifts below ``k_max`` plus an overflow bucket."""

    counts: dict[int, int]
    overflow: int
    total: int
    k_max: int
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_shifts(cls, shifts, k_max: int, metadata: dict | None = None) -> "ShiftHistogram":
        s = np.asarray(shifts, dtype=np.int64)
        valid = s[s >= 0]
        binc = np.bincount(valid, minlength=k_max)
        counts = {int(i): int(c) for i, c in enumerate(binc) if c}
        return cls(counts, int(np.count_nonzero(s < 0)), int(s.size), k_max, dict(metadata or {}))

    def dense(self) -> np.ndarray:
        out = np.zeros(self.k_max, dtype=np.int64)
        for k, v in self.counts.items():
            out[k] = v
        return out

    def mode(self):
        dense = self.dense()
        if self.overflow > dense.max():
            return OVERFLOW
        return int(np.argmax(dense))

    def fraction_at(self, shift: int) -> float:
        return self.counts.get(shift, 0) / self.total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["shift", "count"])
        for k, c in enumerate(self.dense()):
            w.writerow([k, int(c)])
        w.writerow(["overflow", self.overflow])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "k_max": self.k_max,
            "total": self.total,
            "overflow": self.overflow,
            "counts": [int(c) for c in self.dense()],
            "metadata": self.metadata,
        }


def shift_histogram(pairs, codebook: Codebook, k_max: int = DEFAULT_K_MAX, metadata: dict | None = None) -> ShiftHistogram:
    """Aggregate codeword shifts over (z_clean, z_noisy) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no (clean, noisy) pairs given")
    Zc = np.array([p[0] for p in pairs], dtype=np.float64)
    Zn = np.array([p[1] for p in pairs], dtype=np.float64)
    if Zc.ndim != 2 or Zc.shape[1] != codebook.dim or Zn.shape != Zc.shape:
        raise ValueError(f"pairs must hold vectors of dimension {codebook.dim}")
    return ShiftHistogram.from_shifts(codeword_shifts(Zc, Zn, codebook.entries, k_max), k_max, metadata)


# -- SI-SDR ----------------------------------------------------------------------


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB; ``math.inf`` when the estimate is an exact rescaling."""
    if isinstance(reference, AudioSignal) and isinstance(estimate, AudioSignal):
        if reference.sample_rate != estimate.sample_rate:
            raise ValueError("sample rate mismatch")
    r = _samples(reference)
    e = _samples(estimate)
    if r.shape != e.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {e.shape}")
    energy = np.dot(r, r)
    if energy == 0.0:
        raise ValueError("reference signal is silent")
    alpha = np.dot(e, r) / energy
    target = alpha * r
    err = e - target
    err_energy = np.dot(err, err)
    if err_energy == 0.0:
        return math.inf
    target_energy = np.dot(target, target)
    if target_energy == 0.0:
        return -math.inf
    return 10.0 * math.log10(target_energy / err_energy)


def capped_db(value: float) -> float:
    """Clamp dB values to +/-100 so they serialize as finite JSON numbers."""
    return float(min(max(value, -SI_SDR_CAP_DB), SI_SDR_CAP_DB))


# -- framing ---------------------------------------------------------------------


def frame_features(signal, frame_len: int, hop: int) -> np.ndarray:
    """Rectangular frames as rows; samples after the last full frame are dropped."""
    x = _samples(signal)
    if frame_len < 1 or not 1 <= hop <= frame_len:
        raise ValueError(f"need frame_len >= 1 and 1 <= hop <= frame_len, got {frame_len}, {hop}")
    if x.size < frame_len:
        raise ValueError(f"signal of {x.size} samples is shorter than frame_len={frame_len}")
    return np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop].copy()
