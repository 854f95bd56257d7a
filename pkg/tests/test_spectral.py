import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from octave_unet.errors import ConfigError, ShapeError
from octave_unet.spectral import (
    EnergyMap,
    average_energy,
    channel_maps,
    compare_models,
    energy_fraction,
    fft2_magnitude,
    radial_spectrum,
    radius_grid,
    to_png_array,
    write_comparison,
)
from octave_unet.unet import ModelConfig, build


def naive_dft(x):
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            for m in range(h):
                for n in range(w):
                    out[u, v] += x[m, n] * np.exp(-2j * np.pi * (u * m / h + v * n / w))
    return out


def centred(values):
    """Move bin (0, 0) to (H // 2, W // 2) by explicit index arithmetic."""
    h, w = values.shape
    out = np.empty_like(values)
    for u in range(h):
        for v in range(w):
            out[(u + h // 2) % h, (v + w // 2) % w] = values[u, v]
    return out


class TestFFT2Magnitude:
    def test_constant_map(self):
        e = fft2_magnitude(np.full((6, 8), 2.5))
        assert e.values[3, 4] == pytest.approx(2.5 * 48)
        e.values[3, 4] = 0
        assert np.abs(e.values).max() < 1e-9

    def test_cosine(self):
        n = np.arange(16)
        x = np.tile(np.cos(2 * np.pi * 2 * n / 16), (8, 1))
        v = fft2_magnitude(x).values
        peaks = sorted(zip(*np.nonzero(v > 1e-9)))
        assert peaks == [(4, 6), (4, 10)]
        assert v[4, 6] == pytest.approx(v[4, 10]) == pytest.approx(64.0)

    def test_naive_dft_oracle(self, rng):
        x = rng.normal(size=(8, 8))
        expected = centred(np.abs(naive_dft(x)))
        assert np.abs(fft2_magnitude(x).values - expected).max() < 1e-6

    def test_naive_dft_odd_dims(self, rng):
        x = rng.normal(size=(5, 7))
        assert np.abs(fft2_magnitude(x, power=True).values - centred(np.abs(naive_dft(x)) ** 2)).max() < 1e-6

    @given(st.integers(2, 24), st.integers(2, 24), st.integers(0, 2**31))
    def test_parseval(self, h, w, seed):
        x = np.random.default_rng(seed).normal(size=(h, w))
        spectrum = fft2_magnitude(x, power=True).values.sum()
        assert spectrum == pytest.approx(h * w * np.sum(x**2), rel=1e-6)

    @given(st.integers(2, 12), st.integers(2, 12))
    def test_shift_involution(self, h, w):
        a = np.arange(h * w, dtype=float).reshape(h, w)
        assert_array_equal(np.fft.ifftshift(np.fft.fftshift(a)), a)
        if h % 2 == 0 and w % 2 == 0:
            assert_array_equal(np.fft.fftshift(np.fft.fftshift(a)), a)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            fft2_magnitude(np.zeros((1, 5)))

    def test_negative_map_rejected(self):
        with pytest.raises(ValueError):
            EnergyMap(-np.ones((2, 2)))


class TestAverageEnergy:
    def test_single_and_idempotent(self, rng):
        m = EnergyMap(rng.random((4, 4)))
        assert_array_equal(average_energy([m]).values, m.values)
        assert_allclose(average_energy([m, m]).values, m.values)

    def test_disjoint_union(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[:2] = 2.0
        b[2:] = 4.0
        avg = average_energy([EnergyMap(a), EnergyMap(b)]).values
        assert_array_equal(avg, (a + b) / 2)

    def test_counts_compose(self, rng):
        maps = [EnergyMap(rng.random((3, 3))) for _ in range(5)]
        direct = average_energy(maps)
        nested = average_energy([average_energy(maps[:2]), average_energy(maps[2:])])
        assert nested.count == 5
        assert_allclose(nested.values, direct.values, atol=1e-15)

    def test_mixed_dims(self):
        with pytest.raises(ShapeError):
            average_energy([EnergyMap(np.ones((4, 4))), EnergyMap(np.ones((2, 2)))])


class TestRadialSpectrum:
    def test_dc_spike(self):
        c = radial_spectrum(fft2_magnitude(np.ones((8, 8))))
        assert c.values[0] == pytest.approx(64)
        assert np.abs(c.values[1:]).max() < 1e-9

    def test_ring(self):
        v = np.where(radius_grid((16, 16)) == 3, 5.0, 0.0)
        c = radial_spectrum(EnergyMap(v))
        assert c.values[3] == 5.0
        assert np.count_nonzero(c.values) == 1

    def test_radial_profile(self):
        r = radius_grid((20, 20))
        c = radial_spectrum(EnergyMap(np.exp(-r / 4.0)))
        assert_allclose(c.values, np.exp(-np.arange(c.values.size) / 4.0))

    def test_linearity(self, rng):
        maps = [EnergyMap(rng.random((9, 9))) for _ in range(3)]
        avg_curve = radial_spectrum(average_energy(maps)).values
        curve_avg = np.mean([radial_spectrum(m).values for m in maps], axis=0)
        assert_allclose(avg_curve, curve_avg, atol=1e-14)

    def test_normalized_axis(self):
        c = radial_spectrum(EnergyMap(np.ones((8, 12))))
        assert c.nyquist == 4
        assert c.normalized[4] == 1.0
        assert c.csv().splitlines()[0] == "radius_normalized,magnitude"

    def test_energy_fraction(self):
        v = np.ones((16, 16))
        r = radius_grid((16, 16))
        assert energy_fraction(EnergyMap(v), 0.125) == pytest.approx(np.sum(r <= 1) / 256)
        assert energy_fraction(EnergyMap(np.zeros((4, 4))), 0.5) == 0.0


class TestCompareModels:
    @pytest.fixture(scope="class")
    @classmethod
    def models(cls):
        cfg = ModelConfig(depth=2, base_channels=4, alpha=0.5)
        return build(ModelConfig(depth=2, base_channels=4, alpha=0.0), 0), build(cfg, 0), build(cfg, 0)

    @pytest.fixture(scope="class")
    @classmethod
    def images(cls):
        rng = np.random.default_rng(3)
        return [rng.random((3, 16, 16)).astype(np.float32) for _ in range(2)]

    def test_groups_and_lengths(self, models, images):
        base, octave, _ = models
        r = compare_models(base, octave, images)
        assert set(r.maps) == {"baseline", "octave-high", "octave-low"}
        assert r.maps["baseline"].shape == (16, 16)
        assert r.maps["octave-low"].shape == (8, 8)
        # bins run from 0 to the corner distance, about half the diagonal
        assert len(r.curves["octave-high"].values) == round(np.hypot(8, 8)) + 1
        assert r.maps["octave-high"].count == 2 * 2

    def test_identical_models(self, models, images):
        _, a, b = models
        ra, rb = compare_models(a, a, images), compare_models(b, b, images)
        assert_array_equal(ra.curves["octave-high"].values, rb.curves["octave-high"].values)
        assert_array_equal(ra.curves["octave-low"].values, rb.curves["octave-low"].values)

    def test_tap_mismatch(self, models, images):
        base, octave, _ = models
        with pytest.raises(ConfigError):
            compare_models(base, octave, images, taps=["encoder7"])

    def test_mixed_levels_rejected(self, models, images):
        base, octave, _ = models
        with pytest.raises(ConfigError):
            compare_models(base, octave, images, taps=["encoder0", "encoder1"])

    def test_write(self, models, images, tmp_path):
        base, octave, _ = models
        write_comparison(compare_models(base, octave, images[:1]), tmp_path)
        for tag in ("baseline", "octave-high", "octave-low"):
            assert (tmp_path / f"energy_{tag}.png").exists()
            assert (tmp_path / f"energy_{tag}_log.png").exists()
            assert (tmp_path / f"spectrum_{tag}_log.csv").exists()
        assert (tmp_path / "energy_fractions.csv").read_text().startswith("group,")


def test_channel_maps_count(rng):
    assert len(channel_maps(rng.random((2, 3, 4, 4)))) == 6


def test_png_scaling(rng):
    a = to_png_array(EnergyMap(rng.random((4, 4)) * 7))
    assert a.max() == 1.0 and a.min() >= 0
    assert not to_png_array(EnergyMap(np.zeros((2, 2)))).any()
