import numpy as np
import pytest

from ct_tools.datamodel import ProjectionStack, Rng, ValidationError
from ct_tools.degrade_tool import (
    DegradeSpec,
    absorption_scale,
    apply_poisson_noise,
    apply_ring,
    apply_zinger,
    degrade_projections,
    flat_field_correct,
    make_ring_pattern,
    simulate_raw_counts,
)
from ct_tools.geometry_tool import equispaced_angles, rearrange


def _projections(n_theta=6, rows=4, cols=8, seed=0):
    data = np.random.default_rng(seed).uniform(0.5, 2.0, size=(n_theta, rows, cols))
    data[:, :, 0] = 0.0
    return ProjectionStack(data, equispaced_angles(n_theta))


def test_absorption_scale_hits_target_transmission():
    p = _projections().data
    alpha = absorption_scale(p, 0.5)
    covered = p[p > 0]
    assert abs(np.mean(np.exp(-alpha * covered)) - 0.5) < 1e-9


def test_absorption_scale_needs_an_object():
    with pytest.raises(ValidationError):
        absorption_scale(np.zeros((2, 2, 2)), 0.5)


def test_poisson_noise_is_reproducible_and_shrinks_with_dose():
    p = _projections()
    a = apply_poisson_noise(p, 100.0, 0.5, Rng(1))
    b = apply_poisson_noise(p, 100.0, 0.5, Rng(1))
    np.testing.assert_array_equal(a.data, b.data)
    high = apply_poisson_noise(p, 1e6, 0.5, Rng(1))
    assert np.mean((high.data - p.data) ** 2) < np.mean((a.data - p.data) ** 2)
    np.testing.assert_allclose(high.data, p.data, atol=0.05)


def test_poisson_noise_rejects_negative_attenuation():
    p = ProjectionStack(-np.ones((2, 2, 2)), equispaced_angles(2))
    with pytest.raises(ValidationError):
        apply_poisson_noise(p, 100.0, 0.5, Rng(0))


def test_poisson_noise_rejects_absorption_target_outside_open_interval():
    p = _projections()
    for target in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValidationError):
            apply_poisson_noise(p, 100.0, target, Rng(0))


def test_noisy_counts_average_to_expected_counts():
    p = _projections(n_theta=50, rows=20, cols=20, seed=8)
    I0 = 1000.0
    alpha = absorption_scale(p.data, 0.5)
    noisy = apply_poisson_noise(p, I0, 0.5, Rng(11))
    counts = I0 * np.exp(-alpha * noisy.data)
    np.testing.assert_allclose(counts, np.round(counts), atol=1e-6)
    expected = I0 * np.exp(-alpha * p.data)
    assert abs(counts.mean() - expected.mean()) / expected.mean() < 0.01


def test_ring_pattern_touches_expected_pixel_count():
    pattern = make_ring_pattern(10, 20, 0.1, 0.01, Rng(3))
    assert pattern.shape == (10, 20)
    assert int(pattern.mask.sum()) == 20
    assert not pattern.deviations[~pattern.mask].any()


def test_ring_offsets_are_identical_in_every_projection():
    p = _projections()
    pattern = make_ring_pattern(4, 8, 0.25, 0.1, Rng(0))
    diff = apply_ring(p, pattern).data - p.data
    for a in range(1, p.n_theta):
        np.testing.assert_allclose(diff[a], diff[0], atol=1e-12)
    with pytest.raises(ValidationError):
        apply_ring(p, make_ring_pattern(3, 8, 0.25, 0.1, Rng(0)))


def test_ring_pattern_on_square_detector_selects_rounded_count():
    pattern = make_ring_pattern(64, 64, 0.1, 0.005, Rng(0))
    assert int(pattern.mask.sum()) == 410


def test_ring_columns_are_constant_along_angle_in_sinograms():
    p = ProjectionStack(np.zeros((12, 4, 8)), equispaced_angles(12))
    pattern = make_ring_pattern(4, 8, 0.5, 0.1, Rng(5))
    s = rearrange(apply_ring(p, pattern))
    assert not np.ptp(s.data, axis=1).any()
    np.testing.assert_array_equal(s.data[:, 0, :], pattern.deviations)


def test_zingers_hit_expected_projections_and_pixels():
    p = ProjectionStack(np.zeros((10, 4, 5)), equispaced_angles(10))
    out = apply_zinger(p, 0.3, 0.1, 5.0, Rng(2))
    hits_per_projection = (out.data == 5.0).sum(axis=(1, 2))
    assert int((hits_per_projection > 0).sum()) == 3
    assert set(hits_per_projection[hits_per_projection > 0]) == {2}


def test_zinger_count_is_exact_and_capped_at_v():
    p = _projections(n_theta=20, rows=8, cols=16, seed=2)
    out = apply_zinger(p, 0.1, 0.05, 5.0, Rng(9))
    # round(0.1 * 20) projections, round(0.05 * 8 * 16) pixels each
    assert int((out.data == 5.0).sum()) == 2 * 6
    assert out.data.max() == 5.0
    untouched = out.data != 5.0
    np.testing.assert_array_equal(out.data[untouched], p.data[untouched])


def test_zero_probabilities_leave_data_untouched():
    p = _projections()
    out = apply_zinger(p, 0.0, 0.5, 5.0, Rng(0))
    np.testing.assert_array_equal(out.data, p.data)


def test_degrade_without_artifacts_is_identity():
    p = _projections()
    spec = DegradeSpec(noise=False, P_ring=0.0, P_zinger=0.0)
    np.testing.assert_array_equal(degrade_projections(p, spec).data, p.data)


def test_degrade_is_deterministic_under_seed(tiny_degrade):
    p = _projections()
    a = degrade_projections(p, tiny_degrade)
    b = degrade_projections(p, tiny_degrade)
    np.testing.assert_array_equal(a.data, b.data)
    other = DegradeSpec(**{**tiny_degrade.to_dict(), "seed": tiny_degrade.seed + 1})
    assert not np.array_equal(degrade_projections(p, other).data, a.data)


@pytest.mark.parametrize("field,value", [
    ("I0", 0.0),
    ("absorption_target", 1.0),
    ("P_ring", 1.5),
    ("P_proj", -0.1),
    ("sigma_ring", -1.0),
    ("v_zinger", 0.0),
])
def test_invalid_degrade_specs_are_rejected(field, value):
    with pytest.raises(ValidationError):
        DegradeSpec(**{field: value}).validate()


def test_flat_field_correction_recovers_attenuation():
    p = _projections()
    raw, flats, darks = simulate_raw_counts(p, 1e7, Rng(4), dark_level=10.0)
    corrected = flat_field_correct(raw, flats, darks, angles=p.angles)
    np.testing.assert_allclose(corrected.data, p.data, atol=0.02)
    single = flat_field_correct(raw, flats, darks, use_median=False, field_index=3, angles=p.angles)
    np.testing.assert_allclose(single.data, p.data, atol=0.05)


def test_flat_field_correction_validates_fields():
    raw = np.full((2, 3, 3), 50.0)
    with pytest.raises(ValidationError):
        flat_field_correct(raw, [], [np.zeros((3, 3))])
    with pytest.raises(ValidationError):
        flat_field_correct(raw, [np.full((3, 3), 5.0)], [np.full((3, 3), 5.0)])
    with pytest.raises(ValidationError):
        flat_field_correct(raw, [np.full((2, 2), 100.0)], [np.zeros((2, 2))])
    clamped = flat_field_correct(np.zeros((2, 3, 3)), [np.full((3, 3), 100.0)], [np.zeros((3, 3))])
    assert np.all(np.isfinite(clamped.data))
