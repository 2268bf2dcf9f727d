import json
import struct

import numpy as np
import pytest
from scipy.signal import welch

from rvqrobust.analysis import AudioSignal
from rvqrobust.dataio import (
    DatasetManifest,
    GeneratorSpec,
    ManifestEntry,
    ManifestError,
    Role,
    WavFormatError,
    generate,
    load_manifest,
    read_wav,
    to_pcm16,
    write_manifest,
    write_wav,
)


def raw_wav(path, pcm: bytes, channels=1, width=2, rate=16000, fmt=1):
    block = channels * width
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, fmt, channels, rate, rate * block, block, 8 * width)
    header += b"data" + struct.pack("<I", len(pcm))
    path.write_bytes(header + pcm)


def test_read_zeros(tmp_path):
    raw_wav(tmp_path / "z.wav", b"\x00\x00" * 50, rate=8000)
    sig = read_wav(tmp_path / "z.wav")
    assert sig.sample_rate == 8000 and sig.samples.size == 50 and not sig.samples.any()


def test_read_max_sample(tmp_path):
    raw_wav(tmp_path / "m.wav", struct.pack("<hh", 0x7FFF, -0x8000))
    sig = read_wav(tmp_path / "m.wav")
    assert sig.samples[0] == 32767 / 32768
    assert sig.samples[1] == -1.0


def test_read_rejects_stereo_and_8bit(tmp_path):
    raw_wav(tmp_path / "s.wav", b"\x00\x00" * 8, channels=2)
    with pytest.raises(WavFormatError, match="2 channel"):
        read_wav(tmp_path / "s.wav")
    raw_wav(tmp_path / "b.wav", b"\x80" * 8, width=1)
    with pytest.raises(WavFormatError, match="8-bit"):
        read_wav(tmp_path / "b.wav")


def test_read_malformed(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFX0000WAVEjunk")
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "bad.wav")
    raw_wav(tmp_path / "f.wav", b"\x00" * 16, width=4, fmt=3)
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "f.wav")


def test_write_read_roundtrip(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, size=1000)
    write_wav(AudioSignal(x, 16000), tmp_path / "a.wav")
    back = read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(back.samples - x)) <= 1 / 32768
    write_wav(back, tmp_path / "b.wav")
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_pcm_rounding_and_clamping():
    vals = np.array([1.0, -1.0, 0.5 / 32768, -0.5 / 32768, 1.49 / 32768, 2.0, -3.0])
    assert to_pcm16(vals).tolist() == [32767, -32768, 1, -1, 1, 32767, -32768]


def test_write_empty_rejected(tmp_path):
    sig = AudioSignal(np.zeros(1), 16000)
    sig.samples = np.zeros(0)
    with pytest.raises(ValueError):
        write_wav(sig, tmp_path / "e.wav")


def test_white_noise_deterministic():
    spec = GeneratorSpec("white_noise", 0.25, {"amplitude": 0.3})
    a, b = generate(spec, 16000, 5), generate(spec, 16000, 5)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, generate(spec, 16000, 6).samples)


@pytest.mark.parametrize("amp", [0.1, 0.5, 1.0])
def test_tone_peak_bound(amp):
    sig = generate(GeneratorSpec("harmonic_tone", 0.5, {"amplitude": amp, "f0": 220.0}), 16000, 1)
    assert np.max(np.abs(sig.samples)) <= amp
    assert sig.samples.size == 8000


def test_pink_noise_slope():
    rate = 16000
    sig = generate(GeneratorSpec("pink_noise", 10.0, {"amplitude": 0.5}), rate, 3)
    f, p = welch(sig.samples, fs=rate, nperseg=4096)
    band = (f >= 100) & (f <= rate / 4)
    slope_per_octave = np.polyfit(np.log2(f[band]), 10 * np.log10(p[band]), 1)[0]
    assert abs(slope_per_octave - (-3.0)) <= 1.0


def test_generator_spec_validation():
    with pytest.raises(ValueError):
        GeneratorSpec("white_noise", 0.0)
    with pytest.raises(ValueError):
        GeneratorSpec("white_noise", 1.0, {"amplitude": 1.5})
    with pytest.raises(ManifestError, match="unknown generator"):
        GeneratorSpec("brown_noise", 1.0)


def _write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))


def test_manifest_empty(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    with pytest.raises(ManifestError, match="no clean entries"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_wav_plus_generator(tmp_path):
    write_wav(AudioSignal(np.full(100, 0.25), 16000), tmp_path / "c.wav")
    _write_lines(
        tmp_path / "m.jsonl",
        [
            {"id": "utt0", "role": "clean", "path": "c.wav"},
            {"id": "n0", "role": "noise", "generator": {"kind": "pink_noise", "duration_s": 0.5}},
        ],
    )
    m = load_manifest(tmp_path / "m.jsonl", seed=4)
    assert len(m.entries) == 2
    assert [e.role for e in m.entries] == [Role.CLEAN, Role.NOISE]
    np.testing.assert_array_equal(m.load(m.entries[0]).samples, np.full(100, 0.25))
    a = m.load(m.entries[1])
    b = load_manifest(tmp_path / "m.jsonl", seed=4).load(m.entries[1])
    np.testing.assert_array_equal(a.samples, b.samples)


def test_manifest_duplicate_id(tmp_path):
    gen = {"kind": "white_noise", "duration_s": 0.1}
    _write_lines(
        tmp_path / "m.jsonl",
        [{"id": "dup", "role": "clean", "generator": gen}, {"id": "dup", "role": "noise", "generator": gen}],
    )
    with pytest.raises(ManifestError, match="'dup'"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_missing_file_and_bad_kind(tmp_path):
    _write_lines(tmp_path / "m.jsonl", [{"id": "a", "role": "clean", "path": "nope.wav"}])
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "m.jsonl")
    _write_lines(tmp_path / "m.jsonl", [{"id": "a", "role": "clean", "generator": {"kind": "x", "duration_s": 1}}])
    with pytest.raises(ManifestError, match="unknown generator"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_write_load_roundtrip(tmp_path):
    spec = GeneratorSpec("harmonic_tone", 0.2, {"f0": 120.0})
    m = DatasetManifest(
        [
            ManifestEntry("c0", Role.CLEAN, generator=spec, seed=9),
            ManifestEntry("c1", Role.CLEAN, generator=spec, split="test"),
            ManifestEntry("n0", Role.NOISE, generator=GeneratorSpec("white_noise", 1.0)),
        ]
    )
    write_manifest(m, tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert [e.id for e in back.select("clean", "test")] == ["c1"]
    np.testing.assert_array_equal(back.load(back.entries[0]).samples, generate(spec, 16000, 9).samples)
