import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvqrobust.analysis import (
    OVERFLOW,
    SI_SDR_CAP_DB,
    AudioSignal,
    ShiftHistogram,
    capped_db,
    codeword_shift,
    codeword_shifts,
    frame_features,
    measure_snr,
    mix_at_snr,
    shift_histogram,
    si_sdr,
)
from rvqrobust.codebook import Codebook
from rvqrobust.dataio import GeneratorSpec, generate

RATE = 16000


def rank_oracle(z_clean, z_noisy, entries):
    dn = [math.dist(z_noisy, e) for e in entries]
    m = min(range(len(entries)), key=lambda j: (dn[j], j))
    dc = [math.dist(z_clean, e) for e in entries]
    order = sorted(range(len(entries)), key=lambda j: (dc[j], j))
    return order.index(m)


def tone(seed=0, dur=0.5, amp=0.5, f0=150.0):
    return generate(GeneratorSpec("harmonic_tone", dur, {"f0": f0, "amplitude": amp}), RATE, seed)


def noise(seed=0, dur=1.0, kind="white_noise"):
    return generate(GeneratorSpec(kind, dur, {"amplitude": 0.5}), RATE, seed)


# -- mixing ----------------------------------------------------------------------


def test_mix_zero_db_equal_power():
    clean, n = tone(1), noise(2)
    mixed = mix_at_snr(clean, n, 0.0, seed=3)
    scaled = mixed.samples - clean.samples
    assert np.mean(clean.samples**2) == pytest.approx(np.mean(scaled**2), rel=1e-9)


def test_mix_high_snr_relative_error():
    clean, n = tone(4), noise(5)
    mixed = mix_at_snr(clean, n, 60.0, seed=6)
    rel = np.linalg.norm(mixed.samples - clean.samples) / np.linalg.norm(clean.samples)
    assert rel <= 10 ** (-60 / 20) * (1 + 1e-3)


def test_mix_roundtrip_snr():
    rng = np.random.default_rng(0)
    for i in range(20):
        clean = tone(i, amp=float(rng.uniform(0.1, 0.9)), f0=float(rng.uniform(80, 400)))
        n = noise(100 + i, kind="pink_noise" if i % 2 else "white_noise")
        snr = float(rng.uniform(-5, 30))
        mixed = mix_at_snr(clean, n, snr, seed=i)
        assert abs(measure_snr(clean, mixed.samples - clean.samples) - snr) < 0.01


def test_mix_offset_is_seeded():
    clean, n = tone(1, dur=0.1), noise(2)
    a = mix_at_snr(clean, n, 10.0, seed=1)
    b = mix_at_snr(clean, n, 10.0, seed=1)
    c = mix_at_snr(clean, n, 10.0, seed=2)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_mix_errors():
    clean = tone(0, dur=0.2)
    with pytest.raises(ValueError, match="silent"):
        mix_at_snr(AudioSignal(np.zeros(100), RATE), noise(0), 10.0)
    with pytest.raises(ValueError, match="rate"):
        mix_at_snr(clean, AudioSignal(noise(0).samples, 8000), 10.0)
    with pytest.raises(ValueError, match="shorter"):
        mix_at_snr(clean, noise(0, dur=0.1), 10.0)


def test_mix_clipping_is_logged_not_rescaled(caplog):
    clean = AudioSignal(np.full(1600, 0.9), RATE)
    mixed = mix_at_snr(clean, noise(1), 0.0, seed=0)
    assert np.max(np.abs(mixed.samples)) > 1.0
    assert "clips" in caplog.text


def test_snr_ignores_silent_clean_regions():
    t = tone(0, dur=0.5).samples
    clean = AudioSignal(np.concatenate([t, np.zeros(8000)]), RATE)
    n = noise(9, dur=2.0)
    mixed = mix_at_snr(clean, n, 15.0, seed=0)
    assert abs(measure_snr(clean, mixed.samples - clean.samples) - 15.0) < 0.01
    assert 10 * math.log10(np.mean(t**2) / np.mean((mixed.samples - clean.samples)[: t.size] ** 2)) == pytest.approx(15.0, abs=0.5)


# -- codeword shift -----------------------------------------------------------------


def test_shift_identical_is_zero():
    cb = Codebook(np.random.default_rng(0).normal(size=(20, 3)))
    for z in np.random.default_rng(1).normal(size=(20, 3)):
        assert codeword_shift(z, z, cb, 10) == 0


def test_shift_third_closest_is_two():
    cb = Codebook([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    # clean at 0.1: ranking 0,1,2,3. noisy at 2.1 picks entry 2, the 3rd closest
    assert codeword_shift([0.1, 0.0], [2.1, 0.0], cb, 10) == 2


def test_shift_overflow():
    cb = Codebook([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    assert codeword_shift([0.1, 0.0], [3.0, 0.0], cb, 3) is OVERFLOW


def test_shift_matches_rank_oracle():
    rng = np.random.default_rng(2)
    for _ in range(200):
        cb = Codebook(rng.normal(size=(int(rng.integers(2, 40)), 3)))
        zc = rng.normal(size=3)
        zn = zc + rng.normal(scale=float(rng.uniform(0.01, 1.0)), size=3)
        expected = rank_oracle(zc, zn, cb.entries)
        got = codeword_shift(zc, zn, cb, 50)
        assert got == (expected if expected < 50 else OVERFLOW)
        assert codeword_shifts(zc[None], zn[None], cb.entries, 50)[0] == expected


def test_shift_dimension_mismatch():
    cb = Codebook(np.eye(3))
    with pytest.raises(ValueError):
        codeword_shift([1.0, 0.0], [1.0, 0.0, 0.0], cb)


def test_histogram_identical_pairs():
    cb = Codebook(np.random.default_rng(3).normal(size=(8, 2)))
    zs = np.random.default_rng(4).normal(size=(30, 2))
    h = shift_histogram([(z, z) for z in zs], cb, 5)
    assert h.counts == {0: 30} and h.total == 30 and h.overflow == 0
    assert h.mode() == 0


def test_histogram_single_rank_two_pair():
    cb = Codebook([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    # noisy at 1.1 picks entry 1; for clean at -0.2 entry 1 is 2nd closest, a shift of 1
    assert rank_oracle([-0.2, 0.0], [1.1, 0.0], cb.entries) == 1
    h = shift_histogram([([-0.2, 0.0], [1.1, 0.0])], cb, 10)
    assert h.counts == {1: 1} and h.total == 1


def test_histogram_total_and_overflow():
    rng = np.random.default_rng(5)
    cb = Codebook(rng.normal(size=(30, 2)))
    pairs = [(z, z + rng.normal(scale=2.0, size=2)) for z in rng.normal(size=(200, 2))]
    h = shift_histogram(pairs, cb, 4)
    assert sum(h.counts.values()) + h.overflow == h.total == 200
    assert all(k < 4 for k in h.counts)
    lines = h.to_csv().splitlines()
    assert lines[0] == "shift,count" and lines[-1] == f"overflow,{h.overflow}" and len(lines) == 6


def test_histogram_empty():
    with pytest.raises(ValueError):
        shift_histogram([], Codebook(np.eye(2)))


def test_histogram_merge_is_associative():
    s = np.array([0, 0, 1, -1, 3, 2, 0])
    whole = ShiftHistogram.from_shifts(s, 5)
    a, b = ShiftHistogram.from_shifts(s[:3], 5), ShiftHistogram.from_shifts(s[3:], 5)
    np.testing.assert_array_equal(whole.dense(), a.dense() + b.dense())
    assert whole.overflow == a.overflow + b.overflow


# -- SI-SDR -------------------------------------------------------------------------


def test_si_sdr_identity_is_capped():
    r = np.random.default_rng(0).normal(size=200)
    assert si_sdr(r, r) == math.inf
    assert capped_db(si_sdr(r, r)) == SI_SDR_CAP_DB
    assert si_sdr(r, 2 * r) == si_sdr(r, r)


def test_si_sdr_hand_example():
    assert si_sdr([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.0, abs=1e-9)


def test_si_sdr_errors():
    with pytest.raises(ValueError, match="silent"):
        si_sdr([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError, match="length"):
        si_sdr([1.0, 0.0], [1.0])
    with pytest.raises(ValueError, match="rate"):
        si_sdr(AudioSignal([1.0, 0.5], 8000), AudioSignal([1.0, 0.5], 16000))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(1e-3, 1e3), sign=st.sampled_from([-1.0, 1.0]))
def test_si_sdr_scale_invariance(seed, a, sign):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=256)
    est = s + rng.normal(scale=0.3, size=256)
    assert abs(si_sdr(s, sign * a * est) - si_sdr(s, est)) <= 1e-9


# -- framing ------------------------------------------------------------------------


def test_frame_whole_signal():
    x = np.arange(40.0)
    np.testing.assert_array_equal(frame_features(x, 40, 40), [x])


def test_frame_partition_prefix():
    x = np.arange(103.0)
    f = frame_features(x, 10, 10)
    assert f.shape == (10, 10)
    np.testing.assert_array_equal(f.ravel(), x[:100])


def test_frame_overlap_count():
    x = np.arange(100.0)
    f = frame_features(AudioSignal(x, RATE), 40, 20)
    assert f.shape == (4, 40)
    assert f[:, 0].tolist() == [0, 20, 40, 60]


def test_frame_errors():
    with pytest.raises(ValueError):
        frame_features(np.arange(10.0), 20, 5)
    with pytest.raises(ValueError):
        frame_features(np.arange(10.0), 4, 5)
    with pytest.raises(ValueError):
        frame_features(np.arange(10.0), 4, 0)
