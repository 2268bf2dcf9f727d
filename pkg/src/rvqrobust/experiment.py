"""Desk-scale experiment pipeline shared by the CLI and the acceptance suite.

A run is fully described by an ``ExperimentConfig``: the synthetic data
recipe, the codec shape, the baseline and fine-tune training settings and
the evaluation knobs. Every random choice derives from ``config.seed``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .analysis import AudioSignal, ShiftHistogram, capped_db, codeword_shifts, frame_features, mix_at_snr, si_sdr
from .dataio import DatasetManifest, GeneratorSpec, ManifestEntry, Role
from .quantizer import Mode, QuantizerConfig, rvq_encode_batch
from .rng import make_rng
from .training import (
    ProgressiveSchedule,
    ToyCodec,
    TrainConfig,
    TrainReport,
    UpdateScope,
    init_codec,
    perturbation_stress,
    progressive_finetune,
    train_baseline,
)

# stream keys under the experiment seed
_KEY_DATA, _KEY_MIX, _KEY_INIT = 11, 12, 13


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_clean: int = 120
    n_test: int = 20
    clean_duration_s: float = 0.5
    f0_range: tuple[float, float] = (100.0, 300.0)
    amplitude_range: tuple[float, float] = (0.3, 0.8)
    vibrato_rate_range: tuple[float, float] = (3.0, 7.0)
    vibrato_depth_range: tuple[float, float] = (0.005, 0.03)
    n_noise: int = 4
    noise_duration_s: float = 2.0
    noise_kinds: tuple[str, ...] = ("pink_noise", "white_noise")
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_clean < 1:
            raise ConfigError("n_clean must be >= 1")
        if not 0 <= self.n_test < self.n_clean:
            raise ConfigError("n_test must lie in [0, n_clean)")
        if self.n_noise < 1:
            raise ConfigError("n_noise must be >= 1")
        if self.noise_duration_s < self.clean_duration_s:
            raise ConfigError("noise must be at least as long as the clean utterances")


@dataclass
class CodecConfig:
    frame_len: int = 32
    dim: int = 8
    n_stages: int = 6
    codebook_size: int = 64
    latent_scale: float = 10.0
    init: str = "pca"
    commitment_beta: float = 0.25
    kmeans_iters: int = 50

    def __post_init__(self):
        if min(self.frame_len, self.dim, self.n_stages, self.codebook_size) < 1:
            raise ConfigError("codec sizes must be positive")
        if self.init not in ("pca", "random"):
            raise ConfigError(f"unknown init {self.init!r}")


def _default_train() -> TrainConfig:
    return TrainConfig(learning_rate=3e-2, steps=4000, batch_size=64)


def _default_finetune() -> TrainConfig:
    return TrainConfig(
        learning_rate=1e-2,
        steps=1,
        batch_size=64,
        quantizer=QuantizerConfig(Mode.PROBABILISTIC_TOP_K, 10, 5.0),
        update_scope=UpdateScope.DOWNSTREAM_OF_L,
    )


@dataclass
class EvalConfig:
    snrs: tuple = (None, 15.0, 10.0)
    shift_snr_db: float = 15.0
    k_max: int = 50
    stress_draws: int = 1000
    stress_frames: int = 1024
    stress_k: int = 10
    stress_temperature: float = 5.0
    split: str = "test"

    def __post_init__(self):
        if self.split not in ("train", "test", "all"):
            raise ConfigError(f"unknown split {self.split!r}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=_default_train)
    finetune: TrainConfig = field(default_factory=_default_finetune)
    steps_per_stage: int = 300
    stage_sequence: list[int] | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: dict = field(default_factory=dict)

    def schedule(self) -> ProgressiveSchedule:
        if self.stage_sequence is None:
            return ProgressiveSchedule.last_to_first(self.codec.n_stages, self.steps_per_stage)
        return ProgressiveSchedule(list(self.stage_sequence), self.steps_per_stage)

    def train_config(self) -> TrainConfig:
        return _with_seed(self.train, self.seed)

    def finetune_config(self) -> TrainConfig:
        return _with_seed(self.finetune, self.seed)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": _plain(asdict(self.data)),
            "codec": asdict(self.codec),
            "train": self.train.to_dict(),
            "finetune": self.finetune.to_dict(),
            "steps_per_stage": self.steps_per_stage,
            "stage_sequence": self.stage_sequence,
            "eval": _plain(asdict(self.eval)),
            "paths": dict(self.paths),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            base = cls()
            train = base.train.to_dict() | d.get("train", {})
            finetune = base.finetune.to_dict() | d.get("finetune", {})
            return cls(
                seed=int(d.get("seed", 0)),
                data=_sub(DataConfig, d.get("data", {})),
                codec=_sub(CodecConfig, d.get("codec", {})),
                train=TrainConfig.from_dict(train),
                finetune=TrainConfig.from_dict(finetune),
                steps_per_stage=int(d.get("steps_per_stage", base.steps_per_stage)),
                stage_sequence=d.get("stage_sequence"),
                eval=_sub(EvalConfig, d.get("eval", {})),
                paths=dict(d.get("paths", {})),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig.from_dict(cfg.to_dict() | {"seed": seed})


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _sub(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} section must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**vals)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return ExperimentConfig.from_dict(obj)


# -- data --------------------------------------------------------------------------


def synth_manifest(cfg: DataConfig, seed: int) -> DatasetManifest:
    """Generator-backed manifest: harmonic tones with vibrato plus colored noise.

    Per-utterance parameters and generator seeds are drawn from the seed.
    The last ``n_test`` clean entries form the test split.
    """
    rng = make_rng(seed, _KEY_DATA)
    entries = []
    for i in range(cfg.n_clean):
        params = {
            "f0": float(rng.uniform(*cfg.f0_range)),
            "amplitude": float(rng.uniform(*cfg.amplitude_range)),
            "vibrato_rate": float(rng.uniform(*cfg.vibrato_rate_range)),
            "vibrato_depth": float(rng.uniform(*cfg.vibrato_depth_range)),
        }
        split = "test" if i >= cfg.n_clean - cfg.n_test else "train"
        spec = GeneratorSpec("harmonic_tone", cfg.clean_duration_s, params)
        entries.append(
            ManifestEntry(f"clean{i:04d}", Role.CLEAN, generator=spec, split=split,
                          seed=int(rng.integers(2**62)), sample_rate=cfg.sample_rate)
        )
    for j in range(cfg.n_noise):
        kind = cfg.noise_kinds[j % len(cfg.noise_kinds)]
        spec = GeneratorSpec(kind, cfg.noise_duration_s, {"amplitude": 0.5})
        entries.append(
            ManifestEntry(f"noise{j:02d}", Role.NOISE, generator=spec, seed=int(rng.integers(2**62)),
                          sample_rate=cfg.sample_rate)
        )
    return DatasetManifest(entries, seed)


@dataclass
class Corpus:
    clean: list[tuple[str, AudioSignal]]
    noise: list[AudioSignal]
    test_ids: set[str]

    def split(self, name: str | None) -> list[tuple[str, AudioSignal]]:
        if name is None:
            return list(self.clean)
        if name == "test":
            return [c for c in self.clean if c[0] in self.test_ids]
        return [c for c in self.clean if c[0] not in self.test_ids]


def load_corpus(manifest: DatasetManifest) -> Corpus:
    clean = [(e.id, manifest.load(e)) for e in manifest.select(Role.CLEAN)]
    noise = [manifest.load(e) for e in manifest.select(Role.NOISE)]
    test_ids = {e.id for e in manifest.select(Role.CLEAN, "test")}
    return Corpus(clean, noise, test_ids)


def corpus_frames(signals, frame_len: int) -> np.ndarray:
    return np.concatenate([frame_features(s, frame_len, frame_len) for _, s in signals])


def noisy_version(corpus: Corpus, i: int, signal: AudioSignal, snr_db: float, seed: int) -> AudioSignal:
    """Deterministic mixture for clean utterance ``i``; noises are used round-robin."""
    if not corpus.noise:
        raise ConfigError("noisy conditions need at least one noise entry")
    mix_seed = int(make_rng(seed, _KEY_MIX, i).integers(2**62))
    return mix_at_snr(signal, corpus.noise[i % len(corpus.noise)], snr_db, seed=mix_seed)


# -- training ----------------------------------------------------------------------


def initial_codec(cfg: ExperimentConfig, frames: np.ndarray) -> ToyCodec:
    c = cfg.codec
    return init_codec(
        frames, c.dim, c.n_stages, c.codebook_size,
        seed=int(make_rng(cfg.seed, _KEY_INIT).integers(2**62)),
        commitment_beta=c.commitment_beta, kmeans_iters=c.kmeans_iters, init=c.init, latent_scale=c.latent_scale,
    )


def run_baseline(cfg: ExperimentConfig, corpus: Corpus) -> tuple[ToyCodec, TrainReport]:
    frames = corpus_frames(corpus.split("train"), cfg.codec.frame_len)
    return train_baseline(initial_codec(cfg, frames), frames, cfg.train_config())


def run_finetune(cfg: ExperimentConfig, corpus: Corpus, codec: ToyCodec, on_phase=None) -> tuple[ToyCodec, TrainReport]:
    frames = corpus_frames(corpus.split("train"), cfg.codec.frame_len)
    return progressive_finetune(codec, frames, cfg.schedule(), cfg.finetune_config(), on_phase=on_phase)


# -- evaluation --------------------------------------------------------------------


def condition_name(snr) -> str:
    return "clean" if snr is None else f"{float(snr):g}dB"


def reconstruct_signal(codec: ToyCodec, signal: AudioSignal, frame_len: int) -> np.ndarray:
    return codec.reconstruct(frame_features(signal, frame_len, frame_len)).ravel()


def evaluate(codec: ToyCodec, corpus: Corpus, cfg: ExperimentConfig) -> dict:
    """Per-utterance and mean SI-SDR (dB, capped) per condition, plus perturbation stress."""
    fl = cfg.codec.frame_len
    utts = corpus.split(None if cfg.eval.split == "all" else cfg.eval.split)
    if not utts:
        raise ConfigError(f"no clean utterances in split {cfg.eval.split!r}")
    index = {uid: i for i, (uid, _) in enumerate(corpus.clean)}
    per_utt = []
    for uid, sig in utts:
        row = {"id": uid}
        for snr in cfg.eval.snrs:
            src = sig if snr is None else noisy_version(corpus, index[uid], sig, snr, cfg.seed)
            y = reconstruct_signal(codec, src, fl)
            row[condition_name(snr)] = capped_db(si_sdr(sig.samples[: y.size], y))
        per_utt.append(row)
    conds = [condition_name(s) for s in cfg.eval.snrs]
    frames = corpus_frames(utts, fl)
    if frames.shape[0] > cfg.eval.stress_frames:
        # evenly spaced subset so every utterance contributes
        frames = frames[np.linspace(0, frames.shape[0] - 1, cfg.eval.stress_frames).round().astype(int)]
    stress = perturbation_stress(
        codec, frames, cfg.eval.stress_k, cfg.eval.stress_temperature, cfg.eval.stress_draws, seed=cfg.seed
    )
    return {
        "conditions": conds,
        "per_utterance": per_utt,
        "mean_si_sdr": {c: float(np.mean([r[c] for r in per_utt])) for c in conds},
        "perturbation_stress_mse": stress,
    }


def paired_comparison(base: dict, other: dict) -> dict:
    """Per-utterance deltas (other - base) for each condition."""
    if [r["id"] for r in base["per_utterance"]] != [r["id"] for r in other["per_utterance"]]:
        raise ValueError("evaluations cover different utterances")
    out = {}
    for c in base["conditions"]:
        d = [o[c] - b[c] for b, o in zip(base["per_utterance"], other["per_utterance"])]
        out[c] = {"deltas": d, "mean_delta": float(np.mean(d)), "n_positive": int(sum(x > 0 for x in d))}
    out["stress_delta"] = other["perturbation_stress_mse"] - base["perturbation_stress_mse"]
    return out


def stage_shift_histograms(
    codec: ToyCodec, corpus: Corpus, frame_len: int, snr_db: float, k_max: int, seed: int, noisy_signals=None
) -> list[ShiftHistogram]:
    """Codeword-shift histograms per RVQ stage over all clean utterances.

    Stage 1 compares encoder features directly. For stage n > 1 the clean
    and noisy residuals entering stage n are compared against codebook n.
    ``noisy_signals`` overrides the mixtures (one per clean utterance).
    """
    Zc, Zn = [], []
    for i, (_, sig) in enumerate(corpus.clean):
        noisy = noisy_signals[i] if noisy_signals is not None else noisy_version(corpus, i, sig, snr_db, seed)
        Zc.append(codec.encode(frame_features(sig, frame_len, frame_len)))
        Zn.append(codec.encode(frame_features(noisy, frame_len, frame_len)))
    Zc, Zn = np.concatenate(Zc), np.concatenate(Zn)
    qc, qn = rvq_encode_batch(Zc, codec.rvq), rvq_encode_batch(Zn, codec.rvq)
    out = []
    for n, cb in enumerate(codec.rvq.stages):
        shifts = codeword_shifts(qc.residuals[:, n], qn.residuals[:, n], cb.entries, k_max)
        meta = {"stage": n + 1, "snr_db": snr_db, "frames": int(Zc.shape[0]), "utterances": len(corpus.clean)}
        out.append(ShiftHistogram.from_shifts(shifts, k_max, meta))
    return out


def robustness_trial(cfg: ExperimentConfig, snr_db: float = 15.0) -> dict:
    """Baseline vs progressive fine-tune for one seed: stress MSE and noisy SI-SDR."""
    corpus = load_corpus(synth_manifest(cfg.data, cfg.seed))
    base, _ = run_baseline(cfg, corpus)
    tuned, _ = run_finetune(cfg, corpus, base)
    ecfg = copy.deepcopy(cfg)
    ecfg.eval.snrs = (None, snr_db)
    eb, et = evaluate(base, corpus, ecfg), evaluate(tuned, corpus, ecfg)
    cond = condition_name(snr_db)
    return {
        "seed": cfg.seed,
        "stress_baseline": eb["perturbation_stress_mse"],
        "stress_finetuned": et["perturbation_stress_mse"],
        "si_sdr_baseline": eb["mean_si_sdr"],
        "si_sdr_finetuned": et["mean_si_sdr"],
        "noisy_delta": et["mean_si_sdr"][cond] - eb["mean_si_sdr"][cond],
    }


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
