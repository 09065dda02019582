import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lasskit.audio import AudioClip
from lasskit.mixing import (
    SilentSource,
    block_mean_squares,
    clip_guard,
    energy,
    integrated_loudness,
    k_weighting_coefficients,
    loudness_gain,
    measured_snr,
    mix_at_snr,
    normalize_to_loudness,
    snr_scale_factor,
)

from .conftest import noise_clip

# Tabulated 48 kHz K-weighting coefficients (shelf, then high-pass).
BS1770_48K = [
    ([1.53512485958697, -2.69169618940638, 1.19839281085285], [1.0, -1.69065929318241, 0.73248077421585]),
    ([1.0, -2.0, 1.0], [1.0, -1.99004745483398, 0.99007225036621]),
]


def sine(freq, seconds, sr, amp=1.0):
    t = np.arange(int(seconds * sr)) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


class TestEnergy:
    def test_constant(self):
        assert energy(AudioClip(np.ones(100), 8000)) == 100.0

    def test_zeros(self):
        assert energy(AudioClip(np.zeros(10), 8000)) == 0.0

    def test_whole_period_sine(self):
        n = 8000
        x = np.sin(2 * np.pi * 5 * np.arange(n) / n)
        assert energy(AudioClip(x, 8000)) == pytest.approx(n / 2, abs=1e-9)

    def test_empty(self):
        with pytest.raises(ValueError):
            energy(AudioClip(np.zeros(0), 8000))


class TestScaleFactor:
    def test_equal_energies(self):
        assert snr_scale_factor(1.0, 1.0, 0.0) == 1.0

    def test_four_to_one(self):
        assert snr_scale_factor(4.0, 1.0, 0.0) == pytest.approx(2.0)
        assert 10 * math.log10(4.0 / (2.0**2 * 1.0)) == pytest.approx(0.0)

    def test_ten_db(self):
        assert snr_scale_factor(1.0, 1.0, 10.0) == pytest.approx(10 ** -0.5)

    @pytest.mark.parametrize("e1,e2", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_silent(self, e1, e2):
        with pytest.raises(SilentSource):
            snr_scale_factor(e1, e2, 0.0)


class TestMixAtSnr:
    def test_equal_energy_zero_db(self, rng):
        a = noise_clip(rng)
        b = AudioClip(rng.standard_normal(8000), 8000)
        b = b.scaled(math.sqrt(energy(a) / energy(b)))
        res = mix_at_snr(a, b, 0.0)
        assert res.alpha == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(res.mixture.samples, a.samples + b.samples, atol=1e-15)

    def test_mixture_is_exact_sum(self, rng):
        res = mix_at_snr(noise_clip(rng), noise_clip(rng), 7.0)
        np.testing.assert_array_equal(res.mixture.samples, res.target.samples + res.interferer_scaled.samples)

    @pytest.mark.parametrize("snr", [-15.0, 15.0])
    def test_endpoints(self, rng, snr):
        res = mix_at_snr(noise_clip(rng), noise_clip(rng), snr)
        assert measured_snr(res.target, res.interferer_scaled) == pytest.approx(snr, abs=1e-6)

    def test_mismatch(self, rng):
        with pytest.raises(ValueError):
            mix_at_snr(noise_clip(rng, 1.0), noise_clip(rng, 0.5), 0.0)
        with pytest.raises(ValueError):
            mix_at_snr(noise_clip(rng, sr=8000), noise_clip(rng, sr=16000), 0.0)

    def test_silent_interferer(self, rng):
        with pytest.raises(SilentSource):
            mix_at_snr(noise_clip(rng), AudioClip(np.zeros(8000), 8000), 0.0)

    @settings(max_examples=60, deadline=None)
    @given(
        snr=st.floats(-15, 15),
        g1=st.floats(1e-3, 1e3),
        g2=st.floats(1e-3, 1e3),
        seed=st.integers(0, 2**20),
    )
    def test_remeasured_snr_property(self, snr, g1, g2, seed):
        r = np.random.default_rng(seed)
        a = AudioClip(g1 * r.standard_normal(512), 8000)
        b = AudioClip(g2 * r.standard_normal(512), 8000)
        res = mix_at_snr(a, b, snr)
        assert abs(measured_snr(res.target, res.interferer_scaled) - snr) < 1e-6


class TestLoudness:
    def test_coefficients_at_48k_match_table(self):
        for (b, a), (tb, ta) in zip(k_weighting_coefficients(48000), BS1770_48K):
            np.testing.assert_allclose(b, tb, atol=1e-9)
            np.testing.assert_allclose(a, ta, atol=1e-9)

    def test_reference_sine_48k(self):
        # a full-scale 997 Hz sine reads about -3.01 LUFS on standard meters
        assert integrated_loudness(sine(997, 5.0, 48000)) == pytest.approx(-3.01, abs=0.02)

    def test_halving_drops_six_db(self):
        a = integrated_loudness(sine(997, 5.0, 32000))
        b = integrated_loudness(sine(997, 5.0, 32000, 0.5))
        assert a - b == pytest.approx(20 * math.log10(2), abs=1e-9)

    def test_silence_sentinel(self):
        assert integrated_loudness(AudioClip(np.zeros(8000), 8000)) == -math.inf

    def test_too_short(self):
        with pytest.raises(ValueError):
            integrated_loudness(AudioClip(np.ones(100), 8000))

    def test_relative_gate_ignores_quiet_part(self):
        loud = sine(997, 2.0, 48000).samples
        quiet = 1e-3 * loud
        clip = AudioClip(np.concatenate([loud, quiet]), 48000)
        gated = integrated_loudness(clip)
        # the quiet half sits above the absolute gate, so only the relative gate removes it
        ungated = -0.691 + 10 * math.log10(np.mean(block_mean_squares(clip)))
        assert ungated < -5.5
        # boundary blocks that straddle both halves still pass the gate
        assert -3.5 < gated < integrated_loudness(AudioClip(loud, 48000)) + 1e-9

    def test_normalize_from_minus_20_to_minus_30(self, rng):
        clip = normalize_to_loudness(noise_clip(rng, 2.0), -20.0)
        assert integrated_loudness(clip) == pytest.approx(-20.0, abs=0.1)
        assert loudness_gain(clip, -30.0) == pytest.approx(10 ** (-10 / 20), rel=0.02)

    def test_gain_one_at_current_loudness(self, rng):
        clip = noise_clip(rng, 2.0)
        assert loudness_gain(clip, integrated_loudness(clip)) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("target", [-35.0, -25.0])
    def test_range_endpoints_reachable(self, rng, target):
        clip = normalize_to_loudness(noise_clip(rng, 2.0), target)
        assert integrated_loudness(clip) == pytest.approx(target, abs=0.1)

    def test_normalize_silent(self):
        with pytest.raises(SilentSource):
            normalize_to_loudness(AudioClip(np.zeros(8000), 8000), -30.0)


class TestClipGuard:
    def test_rescales_when_clipping(self):
        x = np.array([0.0, 1.5, -0.3])
        out, scale = clip_guard(AudioClip(x, 8000))
        assert scale == pytest.approx(0.6)
        assert np.max(np.abs(out.samples)) == pytest.approx(0.9)

    def test_identity_below_full_scale(self):
        clip = AudioClip(np.array([0.8, -0.2]), 8000)
        out, scale = clip_guard(clip)
        assert scale == 1.0 and out is clip

    def test_bad_peak(self):
        with pytest.raises(ValueError):
            clip_guard(AudioClip(np.ones(3), 8000), peak=0.0)
