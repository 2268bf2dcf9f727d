"""Affine toy codec around the RVQ, baseline training and progressive top-K fine-tuning."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .codebook import DEAD_CODE_THRESHOLD, ema_update, init_kmeans, reseed_dead_codes
from .quantizer import (
    BatchQuantization,
    Mode,
    QuantizerConfig,
    ResidualQuantizer,
    rvq_encode_batch,
)
from .rng import make_rng, rng_state

CHECKPOINT_MAGIC = b"RVQM"
CHECKPOINT_VERSION = 1
DIVERGENCE_LOSS = 1e6
EVAL_FRAMES = 8192


class UpdateScope(str, enum.Enum):
    """Which parameters a progressive phase for stage l may change.

    DOWNSTREAM_OF_L: decoder and codebooks of stages >= l; encoder and
    earlier codebooks are frozen. ALL: everything trains.
    """

    DOWNSTREAM_OF_L = "downstream_of_l"
    ALL = "all"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class ToyCodec:
    """Per-frame affine encoder, residual quantizer, affine decoder.

    Shapes: enc_w (D, D_in), enc_b (D,), dec_w (D_in, D), dec_b (D_in,).
    """

    enc_w: np.ndarray
    enc_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray
    rvq: ResidualQuantizer
    commitment_beta: float = 0.25

    def __post_init__(self):
        self.enc_w = np.array(self.enc_w, dtype=np.float64)
        self.enc_b = np.array(self.enc_b, dtype=np.float64)
        self.dec_w = np.array(self.dec_w, dtype=np.float64)
        self.dec_b = np.array(self.dec_b, dtype=np.float64)
        D, D_in = self.enc_w.shape
        if self.enc_b.shape != (D,) or self.dec_w.shape != (D_in, D) or self.dec_b.shape != (D_in,):
            raise ValueError("encoder/decoder shapes are inconsistent")
        if self.rvq.dim != D:
            raise ValueError(f"encoder output dimension {D} does not match quantizer dimension {self.rvq.dim}")
        if self.commitment_beta < 0:
            raise ValueError("commitment_beta must be nonnegative")
        for name in ("enc_w", "enc_b", "dec_w", "dec_b"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def input_dim(self) -> int:
        return self.enc_w.shape[1]

    @property
    def dim(self) -> int:
        return self.enc_w.shape[0]

    def copy(self) -> "ToyCodec":
        return ToyCodec(
            self.enc_w.copy(), self.enc_b.copy(), self.dec_w.copy(), self.dec_b.copy(), self.rvq.copy(), self.commitment_beta
        )

    def encode(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.enc_w.T + self.enc_b

    def decode(self, Q) -> np.ndarray:
        return np.asarray(Q, dtype=np.float64) @ self.dec_w.T + self.dec_b

    def reconstruct(self, X, config: QuantizerConfig = QuantizerConfig(), rng=None) -> np.ndarray:
        return self.decode(rvq_encode_batch(self.encode(X), self.rvq, config, rng).quantized)

    def equals(self, other: "ToyCodec") -> bool:
        return (
            self.commitment_beta == other.commitment_beta
            and all(np.array_equal(getattr(self, n), getattr(other, n)) for n in ("enc_w", "enc_b", "dec_w", "dec_b"))
            and len(self.rvq.stages) == len(other.rvq.stages)
            and all(a.equals(b) for a, b in zip(self.rvq.stages, other.rvq.stages))
        )


def init_codec(
    frames,
    dim: int,
    n_stages: int,
    codebook_size: int,
    seed: int = 0,
    commitment_beta: float = 0.25,
    kmeans_iters: int = 50,
    kmeans_frames: int = 4096,
    init: str = "pca",
    latent_scale: float = 1.0,
) -> ToyCodec:
    """Initialize a codec from training frames.

    ``init="pca"`` takes the top principal directions as the encoder and its
    transpose as the decoder; ``"random"`` draws small Gaussian weights.
    ``latent_scale`` multiplies the encoder (and divides the decoder), which
    sets latent distances relative to the sampling temperature.
    Each stage's codebook is then fit with k-means on the residual left by
    the earlier stages, over a seeded subset of ``kmeans_frames`` frames.
    """
    X = np.asarray(frames, dtype=np.float64)
    rng = make_rng(seed, 0)
    D_in = X.shape[1]
    if init == "pca":
        mean = X.mean(axis=0)
        _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
        enc_w = vt[:dim].copy()
        enc_b = -enc_w @ mean
        dec_w = enc_w.T.copy()
        dec_b = mean.copy()
    elif init == "random":
        enc_w = rng.normal(0.0, 1.0 / math.sqrt(D_in), size=(dim, D_in))
        enc_b = np.zeros(dim)
        dec_w = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(D_in, dim))
        dec_b = np.zeros(D_in)
    else:
        raise ValueError(f"unknown init {init!r}")
    enc_w, enc_b, dec_w = enc_w * latent_scale, enc_b * latent_scale, dec_w / latent_scale
    sub = X[rng.choice(X.shape[0], size=min(kmeans_frames, X.shape[0]), replace=False)]
    residual = sub @ enc_w.T + enc_b
    stages = []
    for n in range(n_stages):
        cb = init_kmeans(residual, codebook_size, kmeans_iters, seed=int(rng.integers(2**62)))
        idx = np.argmin(((residual[:, None, :] - cb.entries[None]) ** 2).sum(-1), axis=1)
        residual = residual - cb.entries[idx]
        stages.append(cb)
    return ToyCodec(enc_w, enc_b, dec_w, dec_b, ResidualQuantizer(stages), commitment_beta)


# -- forward / backward ------------------------------------------------------------


@dataclass
class ForwardPass:
    inputs: np.ndarray
    latents: np.ndarray
    quant: BatchQuantization
    reconstructions: np.ndarray
    recon_loss: float
    commit_loss: float

    @property
    def loss(self) -> float:
        return self.recon_loss + self.commit_loss

    def breakdown(self) -> dict:
        return {"total": self.loss, "reconstruction": self.recon_loss, "commitment": self.commit_loss}


@dataclass
class Gradients:
    enc_w: np.ndarray
    enc_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray
    quantized: np.ndarray  # d(recon loss)/d(quantized), (B, D)
    latent: np.ndarray  # total d(loss)/d(encoder output) under straight-through, (B, D)
    latent_commit: np.ndarray  # commitment-only part of ``latent``


def forward(codec: ToyCodec, batch, config: QuantizerConfig = QuantizerConfig(), rng=None) -> ForwardPass:
    """Encode, quantize, decode.

    loss = mean squared reconstruction error + beta * mean ||z - sg(z_hat)||^2,
    both means taken over all elements.
    """
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != codec.input_dim:
        raise ValueError(f"batch must have shape (B, {codec.input_dim}), got {X.shape}")
    Z = codec.encode(X)
    quant = rvq_encode_batch(Z, codec.rvq, config, rng)
    Y = codec.decode(quant.quantized)
    recon = float(np.mean((Y - X) ** 2))
    commit = float(codec.commitment_beta * np.mean((Z - quant.quantized) ** 2))
    if not (math.isfinite(recon) and math.isfinite(commit)):
        raise FloatingPointError(f"non-finite loss (reconstruction={recon}, commitment={commit})")
    return ForwardPass(X, Z, quant, Y, recon, commit)


def backward(codec: ToyCodec, fp: ForwardPass) -> Gradients:
    """Hand-derived gradients; the quantizer is bridged straight-through."""
    X, Z, Q, Y = fp.inputs, fp.latents, fp.quant.quantized, fp.reconstructions
    B = X.shape[0]
    g_y = 2.0 * (Y - X) / (B * codec.input_dim)
    g_dec_w = g_y.T @ Q
    g_dec_b = g_y.sum(axis=0)
    g_q = g_y @ codec.dec_w
    g_commit = 2.0 * codec.commitment_beta * (Z - Q) / (B * codec.dim)
    g_z = g_q + g_commit
    return Gradients(g_z.T @ X, g_z.sum(axis=0), g_dec_w, g_dec_b, g_q, g_z, g_commit)


def frozen_loss(codec: ToyCodec, batch, quantized, ste_offset) -> float:
    """Loss as a smooth function of the weights with the quantizer frozen.

    The quantizer output is modeled as ``encode(x) + ste_offset`` (the
    straight-through surrogate) and the commitment target is the fixed
    ``quantized``. At the point where ``ste_offset = quantized - encode(x)``
    this equals ``forward(...).loss`` and its exact gradient is ``backward``.
    """
    X = np.asarray(batch, dtype=np.float64)
    Z = codec.encode(X)
    Y = codec.decode(Z + ste_offset)
    return float(np.mean((Y - X) ** 2) + codec.commitment_beta * np.mean((Z - quantized) ** 2))


# -- training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    steps: int = 2000
    batch_size: int = 64
    seed: int = 0
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    update_scope: UpdateScope = UpdateScope.DOWNSTREAM_OF_L
    dead_code_threshold: float = DEAD_CODE_THRESHOLD

    def __post_init__(self):
        self.update_scope = UpdateScope(self.update_scope)
        if isinstance(self.quantizer, dict):
            self.quantizer = QuantizerConfig.from_dict(self.quantizer)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "quantizer": self.quantizer.to_dict(),
            "update_scope": self.update_scope.value,
            "dead_code_threshold": self.dead_code_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class ProgressiveSchedule:
    """Stages to perturb, in order, and the step budget spent on each."""

    stage_sequence: list[int]
    steps_per_stage: int = 500

    @classmethod
    def last_to_first(cls, n_stages: int, steps_per_stage: int = 500) -> "ProgressiveSchedule":
        return cls(list(range(n_stages, 0, -1)), steps_per_stage)

    def validate(self, n_stages: int) -> None:
        if self.steps_per_stage < 0:
            raise ValueError("steps_per_stage must be nonnegative")
        bad = [s for s in self.stage_sequence if not 1 <= s <= n_stages]
        if bad:
            raise ValueError(f"schedule references stages outside [1, {n_stages}]: {bad}")


@dataclass
class TrainReport:
    seed: int
    update_scope: str
    loss_trace: list[float] = field(default_factory=list)
    perturbed_stages: list[int | None] = field(default_factory=list)
    stage_mse: list[float] = field(default_factory=list)
    usage_entropy: list[float] = field(default_factory=list)
    phases: list[dict] = field(default_factory=list)
    reseeded: int = 0
    diverged_at: int | None = None
    # generator state after the last step; kept for checkpoints, not exported
    rng_state: dict | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "update_scope": self.update_scope,
            "steps": len(self.loss_trace),
            "loss_trace": self.loss_trace,
            "perturbed_stages": self.perturbed_stages,
            "stage_mse": self.stage_mse,
            "usage_entropy_bits": self.usage_entropy,
            "phases": self.phases,
            "reseeded": self.reseeded,
            "diverged_at": self.diverged_at,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "perturbed_stage"])
        for i, (loss, stage) in enumerate(zip(self.loss_trace, self.perturbed_stages)):
            w.writerow([i, repr(loss), "" if stage is None else stage])
        return buf.getvalue()


def stage_metrics(codec: ToyCodec, frames, max_frames: int = EVAL_FRAMES) -> tuple[list[float], list[float]]:
    """Reconstruction MSE using the first n stages (n = 1..N) and per-stage usage entropy in bits."""
    X = np.asarray(frames, dtype=np.float64)[:max_frames]
    quant = rvq_encode_batch(codec.encode(X), codec.rvq)
    partial = np.zeros((X.shape[0], codec.dim))
    mse, entropy = [], []
    for n, cb in enumerate(codec.rvq.stages):
        partial = partial + cb.entries[quant.indices[:, n]]
        mse.append(float(np.mean((codec.decode(partial) - X) ** 2)))
        p = np.bincount(quant.indices[:, n], minlength=cb.size) / X.shape[0]
        p = p[p > 0]
        entropy.append(float(-(p * np.log2(p)).sum()))
    return mse, entropy


def _train_steps(codec, frames, config, qconfig, steps, rng, report, trainable_from: int | None) -> ToyCodec:
    """Run SGD + EMA steps in place on ``codec``.

    ``trainable_from=None`` trains everything. Otherwise the encoder and
    codebooks of stages below ``trainable_from`` stay frozen.
    """
    lr = config.learning_rate
    update_encoder = trainable_from is None
    first_stage = 1 if trainable_from is None else trainable_from
    for _ in range(steps):
        step = len(report.loss_trace)
        batch = frames[rng.integers(0, frames.shape[0], size=config.batch_size)]
        try:
            fp = forward(codec, batch, qconfig, rng)
        except FloatingPointError as exc:
            report.diverged_at = step
            raise TrainingDiverged(f"step {step}: {exc}", report) from None
        if fp.loss > DIVERGENCE_LOSS:
            report.diverged_at = step
            raise TrainingDiverged(f"step {step}: loss {fp.loss:.3g} exceeds {DIVERGENCE_LOSS:g}", report)
        report.loss_trace.append(fp.loss)
        report.perturbed_stages.append(fp.quant.sampled_stage)
        if lr:
            g = backward(codec, fp)
            codec.dec_w -= lr * g.dec_w
            codec.dec_b -= lr * g.dec_b
            if update_encoder:
                codec.enc_w -= lr * g.enc_w
                codec.enc_b -= lr * g.enc_b
        for n in range(first_stage, codec.rvq.n_stages + 1):
            feats = fp.quant.residuals[:, n - 1]
            cb = ema_update(codec.rvq.stages[n - 1], feats, fp.quant.indices[:, n - 1])
            if config.dead_code_threshold > 0:
                cb, count = reseed_dead_codes(cb, feats, config.dead_code_threshold, seed=int(rng.integers(2**62)))
                report.reseeded += count
            codec.rvq.stages[n - 1] = cb
    return codec


def _as_frames(dataset, codec: ToyCodec) -> np.ndarray:
    frames = np.asarray(dataset, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != codec.input_dim or frames.shape[0] == 0:
        raise ValueError(f"dataset must be a non-empty (F, {codec.input_dim}) frame array")
    return frames


def train_baseline(codec: ToyCodec, dataset, config: TrainConfig) -> tuple[ToyCodec, TrainReport]:
    """Nearest-neighbor training: SGD on the forward loss, EMA on the codebooks."""
    if config.quantizer.mode is not Mode.DETERMINISTIC:
        raise ValueError("baseline training uses the deterministic quantizer")
    frames = _as_frames(dataset, codec)
    out = codec.copy()
    report = TrainReport(config.seed, UpdateScope.ALL.value)
    rng = make_rng(config.seed, 1)
    _train_steps(out, frames, config, config.quantizer, config.steps, rng, report, None)
    report.rng_state = rng_state(rng)
    report.stage_mse, report.usage_entropy = stage_metrics(out, frames)
    return out, report


def progressive_finetune(
    codec: ToyCodec, dataset, schedule: ProgressiveSchedule, config: TrainConfig, on_phase=None
) -> tuple[ToyCodec, TrainReport]:
    """Probabilistic top-K fine-tuning, one perturbed stage per phase in schedule order.

    ``on_phase(stage, before, after)``, if given, receives copies of the
    codec at the start and end of each phase.
    """
    if config.quantizer.mode is not Mode.PROBABILISTIC_TOP_K:
        raise ValueError("progressive fine-tuning needs the probabilistic top-K quantizer")
    schedule.validate(codec.rvq.n_stages)
    frames = _as_frames(dataset, codec)
    out = codec.copy()
    report = TrainReport(config.seed, config.update_scope.value)
    rng = make_rng(config.seed, 2)
    for l in schedule.stage_sequence:
        qconfig = replace(config.quantizer, perturbed_stage=l)
        start = len(report.loss_trace)
        trainable_from = l if config.update_scope is UpdateScope.DOWNSTREAM_OF_L else None
        before = out.copy() if on_phase else None
        _train_steps(out, frames, config, qconfig, schedule.steps_per_stage, rng, report, trainable_from)
        losses = report.loss_trace[start:]
        report.phases.append(
            {
                "stage": l,
                "start_step": start,
                "steps": len(losses),
                "mean_loss": float(np.mean(losses)) if losses else None,
                "stage_mse": stage_metrics(out, frames)[0],
            }
        )
        if on_phase:
            on_phase(l, before, out.copy())
    report.rng_state = rng_state(rng)
    report.stage_mse, report.usage_entropy = stage_metrics(out, frames)
    return out, report


# -- robustness probe -------------------------------------------------------------


def stress_draws(codec: ToyCodec, batch, k: int, temperature: float, draws: int, seed: int) -> np.ndarray:
    """Per-draw reconstruction MSE with one uniformly chosen stage sampled from its top-K.

    Draw i uses the stream ``make_rng(seed, i)``, so a shorter run is a
    prefix of a longer one.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    X = np.asarray(batch, dtype=np.float64)
    Z = codec.encode(X)
    out = np.empty(draws)
    for i in range(draws):
        rng = make_rng(seed, i)
        stage = int(rng.integers(1, codec.rvq.n_stages + 1))
        cfg = QuantizerConfig(Mode.PROBABILISTIC_TOP_K, k, temperature, stage)
        Q = rvq_encode_batch(Z, codec.rvq, cfg, rng).quantized
        out[i] = np.mean((codec.decode(Q) - X) ** 2)
    return out


def perturbation_stress(codec: ToyCodec, batch, k: int = 10, temperature: float = 5.0, draws: int = 100, seed: int = 0) -> float:
    return float(stress_draws(codec, batch, k, temperature, draws, seed).mean())


# -- checkpoints ------------------------------------------------------------------


def checkpoint_bytes(codec: ToyCodec, meta: dict | None = None) -> bytes:
    """Binary checkpoint: header, f64 weights, embedded RVQ blob, JSON metadata.

    ``meta`` conventionally carries the TrainConfig snapshot and RNG state.
    """
    rvq_blob = codec.rvq.to_bytes()
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<IIId", CHECKPOINT_VERSION, codec.input_dim, codec.dim, codec.commitment_beta),
    ]
    for arr in (codec.enc_w, codec.enc_b, codec.dec_w, codec.dec_b):
        parts.append(arr.astype("<f8").tobytes())
    parts += [struct.pack("<Q", len(rvq_blob)), rvq_blob, struct.pack("<Q", len(meta_blob)), meta_blob]
    return b"".join(parts)


def codec_from_bytes(blob: bytes) -> tuple[ToyCodec, dict]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a codec checkpoint (bad magic)")
    version, D_in, D, beta = struct.unpack_from("<IIId", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IIId")

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(blob, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
        return arr

    enc_w = take(D * D_in, (D, D_in))
    enc_b = take(D, (D,))
    dec_w = take(D_in * D, (D_in, D))
    dec_b = take(D_in, (D_in,))
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8
    rvq = ResidualQuantizer.from_bytes(blob[off : off + n])
    off += n
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8
    meta = json.loads(blob[off : off + n].decode("utf-8"))
    return ToyCodec(enc_w, enc_b, dec_w, dec_b, rvq, beta), meta


def save_checkpoint(path, codec: ToyCodec, meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(codec, meta))


def load_checkpoint(path) -> tuple[ToyCodec, dict]:
    with open(path, "rb") as f:
        return codec_from_bytes(f.read())
