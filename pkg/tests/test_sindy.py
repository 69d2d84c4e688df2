import numpy as np
import pytest

from compositional_inference.exceptions import InvalidParams, LengthMismatch, RankDeficient, TooFewSamples
from compositional_inference.numerics import make_rng
from compositional_inference.sindy import (
    SindyConfig,
    build_library,
    fit_interface_law,
    reconstruct_kinematics,
    stlsq,
)

DT = 1e-3
LOW_CUTOFF = 0.002


def tone_pair(t, amplitude, low_hz, high_hz):
    """Zero-mean motion that starts at rest, so both integrals are drift free."""
    w, w2 = 2 * np.pi * low_hz, 2 * np.pi * high_hz
    x = amplitude * (np.sin(w * t) - (w / w2) * np.sin(w2 * t))
    v = amplitude * w * (np.cos(w * t) - np.cos(w2 * t))
    a = amplitude * w * (w2 * np.sin(w2 * t) - w * np.sin(w * t))
    return x, v, a


def two_tone_record(horizon=10.0, k=5e4, c=300.0):
    t = np.arange(int(round(horizon / DT)) + 1) * DT
    x_a, v_a, a_a = tone_pair(t, 0.01, 2.0, 5.0)
    x_b, v_b, a_b = tone_pair(t, 0.005, 3.0, 7.0)
    force = k * (x_a - x_b) + c * (v_a - v_b)
    return t, a_a, a_b, force, x_a, v_a


class TestSindyConfig:
    """Test regression settings."""

    def test_invalid(self):
        """Test rejected settings."""
        with pytest.raises(InvalidParams):
            SindyConfig(threshold=0.0)
        with pytest.raises(InvalidParams):
            SindyConfig(max_iters=0)


class TestKinematics:
    """Test displacement and velocity reconstruction."""

    def test_motion_recovered(self):
        """Test that two-tone motion is recovered away from the record ends."""
        t, a_a, _, _, x_a, v_a = two_tone_record()
        x, v = reconstruct_kinematics(a_a, DT, LOW_CUTOFF)
        window = slice(1000, -1000)
        assert np.max(np.abs(x[window] - x_a[window])) < 1e-4
        assert np.max(np.abs(v[window] - v_a[window])) < 1e-3

    def test_gain_at_cutoff(self):
        """Test that each integral is attenuated by one first-order stage at the cutoff."""
        cutoff = 0.5
        w = 2 * np.pi * cutoff
        t = np.arange(int(round(40.0 / DT)) + 1) * DT
        x, v = reconstruct_kinematics(w * np.cos(w * t), DT, cutoff)
        settled = t >= 20.0
        assert np.max(np.abs(v[settled])) == pytest.approx(1 / np.sqrt(2), rel=1e-3)
        assert np.max(np.abs(x[settled])) * w == pytest.approx(0.5, rel=1e-3)

    def test_phase_lead_at_cutoff(self):
        """Test that the velocity leads the true motion by a quarter of pi at the cutoff."""
        cutoff = 0.5
        w = 2 * np.pi * cutoff
        t = np.arange(int(round(40.0 / DT)) + 1) * DT
        _, v = reconstruct_kinematics(w * np.cos(w * t), DT, cutoff)
        settled = t >= 20.0
        expected = np.sin(w * t[settled] + np.pi / 4) / np.sqrt(2)
        np.testing.assert_allclose(v[settled], expected, atol=1e-3)

    def test_too_few_samples(self):
        """Test that very short records are rejected."""
        with pytest.raises(TooFewSamples):
            reconstruct_kinematics([1.0, 2.0], DT)


class TestLibrary:
    """Test the candidate library."""

    def test_columns(self):
        """Test the six library columns."""
        theta = build_library([2.0], [-3.0])
        np.testing.assert_allclose(theta, [[2.0, -3.0, 8.0, -9.0, -6.0, 1.0]])

    def test_length_mismatch(self):
        """Test that dx and dv must align."""
        with pytest.raises(LengthMismatch):
            build_library([1.0, 2.0], [1.0])


class TestStlsq:
    """Test sequentially thresholded least squares."""

    def test_exact_sparse_recovery(self):
        """Test recovery of a sparse coefficient vector from exact data."""
        rng = make_rng(0)
        theta = rng.normal(size=(200, 6))
        xi_true = np.array([50.0, 3.0, 0.0, 0.0, 0.0, 0.0])
        xi = stlsq(theta, theta @ xi_true)
        np.testing.assert_allclose(xi, xi_true, atol=1e-9)

    def test_small_terms_pruned(self):
        """Test that coefficients below the threshold are zeroed."""
        rng = make_rng(1)
        theta = rng.normal(size=(500, 6))
        target = theta @ np.array([10.0, 0.0, 0.0, 0.0, 0.0, 0.0]) + 1e-3 * rng.normal(size=500)
        xi = stlsq(theta, target, SindyConfig(threshold=0.5))
        assert xi[0] == pytest.approx(10.0, abs=1e-3)
        assert np.count_nonzero(xi) == 1

    def test_rank_deficient(self):
        """Test that duplicated columns raise RankDeficient."""
        theta = np.column_stack([np.arange(10.0), np.arange(10.0)])
        with pytest.raises(RankDeficient):
            stlsq(theta, np.arange(10.0))

    def test_length_mismatch(self):
        """Test that the target must match the rows."""
        with pytest.raises(LengthMismatch):
            stlsq(np.ones((3, 2)), np.ones(4))


class TestFitInterfaceLaw:
    """Test learning a spring-damper from accelerations."""

    @pytest.mark.parametrize("cutoff", [LOW_CUTOFF, 0.05, 0.5])
    def test_linear_interface_recovered(self, cutoff):
        """Test that stiffness and damping are recovered from clean records at any cutoff."""
        _, a_a, a_b, force, _, _ = two_tone_record()
        fit = fit_interface_law(a_a, a_b, force, SindyConfig(dt=DT, highpass_cutoff=cutoff))
        assert fit.law.stiffness == pytest.approx(5e4, rel=0.02)
        assert fit.law.damping == pytest.approx(300.0, rel=0.1)
        assert fit.residual_rms < 0.05 * np.sqrt(np.mean(force ** 2))
        assert fit.displacement.shape == force.shape

    def test_short_record(self):
        """Test that a record shorter than the trim windows is rejected."""
        _, a_a, a_b, force, _, _ = two_tone_record(horizon=1.5)
        with pytest.raises(TooFewSamples):
            fit_interface_law(a_a, a_b, force, SindyConfig(dt=DT))

    def test_length_mismatch(self):
        """Test that the three records must align."""
        with pytest.raises(LengthMismatch):
            fit_interface_law(np.ones(10), np.ones(10), np.ones(9))
