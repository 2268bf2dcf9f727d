"""WAV I/O, synthetic signal generators and JSON-lines dataset manifests."""

from __future__ import annotations

import enum
import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import AudioSignal
from .rng import make_rng

DEFAULT_SAMPLE_RATE = 16000


class WavFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def read_wav(path) -> AudioSignal:
    """Read a mono 16-bit PCM WAV file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, nframes = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            if channels != 1 or width != 2:
                raise WavFormatError(
                    f"{path}: unsupported WAV format ({channels} channel(s), {8 * width}-bit); need mono 16-bit PCM"
                )
            raw = w.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: malformed or non-PCM WAV file ({exc})") from exc
    data = np.frombuffer(raw, dtype="<i2")
    if data.size == 0:
        raise WavFormatError(f"{path}: WAV file holds no samples")
    return AudioSignal(data.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    """Round half away from zero, then clamp to the int16 range."""
    scaled = np.asarray(samples, dtype=np.float64) * 32768.0
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, -32768, 32767).astype("<i2")


def write_wav(signal: AudioSignal, path) -> None:
    pcm = to_pcm16(signal.samples)
    if pcm.size == 0:
        raise ValueError("refusing to write an empty signal")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(signal.sample_rate)
        w.writeframes(pcm.tobytes())


# -- generators ------------------------------------------------------------------


class GeneratorKind(str, enum.Enum):
    HARMONIC_TONE = "harmonic_tone"
    CHIRP_SWEEP = "chirp_sweep"
    WHITE_NOISE = "white_noise"
    PINK_NOISE = "pink_noise"


@dataclass(frozen=True)
class GeneratorSpec:
    """Synthetic source description.

    Recognized params (all optional): ``amplitude`` (peak, default 0.5);
    tones take ``f0``, ``vibrato_rate``, ``vibrato_depth`` (fraction of f0),
    ``partial_decay``; chirps take ``f_start`` and ``f_end``.
    """

    kind: GeneratorKind
    duration_s: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", GeneratorKind(self.kind))
        except ValueError:
            raise ManifestError(f"unknown generator kind {self.kind!r}") from None
        if not self.duration_s > 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s}")
        amp = self.amplitude
        if not 0.0 < amp <= 1.0:
            raise ValueError(f"amplitude must lie in (0, 1], got {amp}")

    @property
    def amplitude(self) -> float:
        return float(self.params.get("amplitude", 0.5))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "duration_s": self.duration_s, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(d["kind"], float(d["duration_s"]), dict(d.get("params", {})))


def _harmonic_tone(spec: GeneratorSpec, t: np.ndarray, rate: int, rng) -> np.ndarray:
    p = spec.params
    f0 = float(p.get("f0", 150.0))
    vib_rate = float(p.get("vibrato_rate", 5.0))
    vib_depth = float(p.get("vibrato_depth", 0.02))
    decay = float(p.get("partial_decay", 0.5))
    vib_phase = rng.uniform(0, 2 * np.pi)
    inst_f0 = f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + vib_phase))
    phase = 2 * np.pi * np.cumsum(inst_f0) / rate
    weights = decay ** np.arange(4)
    weights /= weights.sum()
    offsets = rng.uniform(0, 2 * np.pi, size=4)
    x = sum(w * np.sin((h + 1) * phase + o) for h, (w, o) in enumerate(zip(weights, offsets)))
    return spec.amplitude * x


def _chirp(spec: GeneratorSpec, t: np.ndarray, rate: int, rng) -> np.ndarray:
    f_start = float(spec.params.get("f_start", 100.0))
    f_end = float(spec.params.get("f_end", rate / 4))
    inst = f_start + (f_end - f_start) * t / spec.duration_s
    return spec.amplitude * np.sin(2 * np.pi * np.cumsum(inst) / rate + rng.uniform(0, 2 * np.pi))


def _peak_normalize(x: np.ndarray, amplitude: float) -> np.ndarray:
    return amplitude * x / np.max(np.abs(x))


def _pink(n: int, rng) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spectrum.size, dtype=np.float64)
    f[0] = 1.0
    spectrum /= np.sqrt(f)
    spectrum[0] = 0.0
    return np.fft.irfft(spectrum, n)


def generate(spec: GeneratorSpec, sample_rate: int = DEFAULT_SAMPLE_RATE, seed: int = 0) -> AudioSignal:
    """Deterministic synthetic signal for (spec, sample_rate, seed)."""
    n = max(1, int(round(spec.duration_s * sample_rate)))
    t = np.arange(n) / sample_rate
    rng = make_rng(seed)
    if spec.kind is GeneratorKind.HARMONIC_TONE:
        x = _harmonic_tone(spec, t, sample_rate, rng)
    elif spec.kind is GeneratorKind.CHIRP_SWEEP:
        x = _chirp(spec, t, sample_rate, rng)
    elif spec.kind is GeneratorKind.WHITE_NOISE:
        x = _peak_normalize(rng.standard_normal(n), spec.amplitude)
    else:
        x = _peak_normalize(_pink(n, rng), spec.amplitude)
    return AudioSignal(x, sample_rate)


# -- manifests -------------------------------------------------------------------


class Role(str, enum.Enum):
    CLEAN = "clean"
    NOISE = "noise"


@dataclass(frozen=True)
class ManifestEntry:
    """One manifest line. Exactly one of ``path`` / ``generator`` is set.

    ``split`` is "train" or "test"; ``seed`` overrides the derived generator seed.
    """

    id: str
    role: Role
    path: Path | None = None
    generator: GeneratorSpec | None = None
    split: str = "train"
    seed: int | None = None
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def to_dict(self, base: Path | None = None) -> dict:
        d: dict = {"id": self.id, "role": self.role.value}
        if self.path is not None:
            p = self.path
            if base is not None:
                try:
                    p = p.relative_to(base)
                except ValueError:
                    pass
            d["path"] = p.as_posix()
        else:
            d["generator"] = self.generator.to_dict()
            d["sample_rate"] = self.sample_rate
            if self.seed is not None:
                d["seed"] = self.seed
        if self.split != "train":
            d["split"] = self.split
        return d


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int = 0

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate id {e.id!r}")
            seen.add(e.id)
        if not any(e.role is Role.CLEAN for e in self.entries):
            raise ManifestError("no clean entries")

    def select(self, role: Role | str, split: str | None = None) -> list[ManifestEntry]:
        role = Role(role)
        return [e for e in self.entries if e.role is role and (split is None or e.split == split)]

    def load(self, entry: ManifestEntry) -> AudioSignal:
        """Materialize one entry; generator seeds derive from (manifest seed, position)."""
        if entry.path is not None:
            return read_wav(entry.path)
        seed = entry.seed
        if seed is None:
            seed = int(make_rng(self.seed, self.entries.index(entry)).integers(2**63))
        return generate(entry.generator, entry.sample_rate, seed)


def _parse_entry(obj: dict, base: Path, lineno: int) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    for key in ("id", "role"):
        if key not in obj:
            raise ManifestError(f"line {lineno}: missing field {key!r}")
    try:
        role = Role(obj["role"])
    except ValueError:
        raise ManifestError(f"line {lineno}: unknown role {obj['role']!r}") from None
    has_path, has_gen = "path" in obj, "generator" in obj
    if has_path == has_gen:
        raise ManifestError(f"line {lineno}: give exactly one of 'path' or 'generator'")
    split = obj.get("split", "train")
    if split not in ("train", "test"):
        raise ManifestError(f"line {lineno}: unknown split {split!r}")
    if has_path:
        path = Path(obj["path"])
        if not path.is_absolute():
            path = base / path
        if not path.is_file():
            raise ManifestError(f"line {lineno}: file not found: {path}")
        return ManifestEntry(str(obj["id"]), role, path=path, split=split)
    gen = obj["generator"]
    if not isinstance(gen, dict) or "kind" not in gen or "duration_s" not in gen:
        raise ManifestError(f"line {lineno}: generator needs 'kind' and 'duration_s'")
    spec = GeneratorSpec.from_dict(gen)
    return ManifestEntry(
        str(obj["id"]),
        role,
        generator=spec,
        split=split,
        seed=obj.get("seed"),
        sample_rate=int(obj.get("sample_rate", DEFAULT_SAMPLE_RATE)),
    )


def load_manifest(path, seed: int = 0) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest. Relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        entries.append(_parse_entry(obj, base, lineno))
    return DatasetManifest(entries, seed)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [json.dumps(e.to_dict(path.parent), sort_keys=True) for e in manifest.entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
