import csv
import json

import numpy as np
import pytest

from ct_tools.classical_tool import (
    PRESETS,
    ClassicalParams,
    default_grid,
    destripe_sinogram,
    grid_search,
    load_grid,
    median_denoise,
    remove_outlier_median,
    ring_removal_wavelet_fourier,
    run_chain,
    write_score_table,
)
from ct_tools.datamodel import PersistenceError, ProjectionStack, SinogramStack, ValidationError, Volume
from ct_tools.geometry_tool import equispaced_angles


def _smooth_projections(n_theta=8, rows=3, cols=16):
    x = np.linspace(0.0, 1.0, cols)
    data = np.broadcast_to(np.sin(np.pi * x), (n_theta, rows, cols)).copy()
    return ProjectionStack(data, equispaced_angles(n_theta))


def test_outlier_removal_replaces_isolated_zinger_by_its_median():
    p = _smooth_projections()
    spiked = p.data.copy()
    spiked[2, 1, 7] = 5.0
    out = remove_outlier_median(ProjectionStack(spiked, p.angles), dif=0.5, size=3)
    assert out.data[2, 1, 7] == np.median(spiked[2, 0:3, 6:9])
    mask = np.ones(p.shape, dtype=bool)
    mask[2, 1, 7] = False
    np.testing.assert_array_equal(out.data[mask], spiked[mask])


def test_outlier_removal_validates_window():
    p = _smooth_projections()
    with pytest.raises(ValidationError):
        remove_outlier_median(p, dif=0.5, size=4)
    with pytest.raises(ValidationError):
        remove_outlier_median(p, dif=0.0, size=3)


def test_destripe_without_damping_reconstructs_input():
    sino = np.random.default_rng(0).random((16, 16))
    np.testing.assert_allclose(destripe_sinogram(sino, 2, "haar", 2.0, damping=False), sino, atol=1e-10)
    odd = np.random.default_rng(1).random((15, 13))
    np.testing.assert_allclose(destripe_sinogram(odd, 2, "db2", 2.0, damping=False), odd, atol=1e-10)


def test_destripe_removes_most_of_a_stripe_pattern():
    stripe = np.random.default_rng(2).normal(0.0, 1.0, 32)
    stripe -= stripe.mean()
    sino = np.broadcast_to(stripe, (32, 32)).copy()
    out = destripe_sinogram(sino, 3, "haar", 2.0)
    assert np.sum(out ** 2) < 0.5 * np.sum(sino ** 2)


def test_destripe_removes_a_single_column_stripe():
    sino = np.zeros((32, 32))
    sino[:, 13] = 1.0
    out = destripe_sinogram(sino, 3, "haar", 2.0)
    # what survives is the stripe's share of one 8-column approximation block
    before = np.var(sino.mean(axis=0))
    after = np.var(out.mean(axis=0))
    assert after <= 0.1 * before
    np.testing.assert_allclose(out[:, 8:16], 1.0 / 8.0, atol=1e-10)


def test_destripe_barely_changes_a_stripe_free_smooth_sinogram():
    i = np.arange(32)[:, None]
    j = np.arange(32)[None, :]
    sino = 3.0 + np.sin(2 * np.pi * i / 32) + 0.2 * np.cos(np.pi * (j + 0.5) / 32)
    out = destripe_sinogram(sino, 3, "haar", 2.0)
    assert np.linalg.norm(out - sino) / np.linalg.norm(sino) < 0.02


def test_ring_removal_checks_level_against_angle_count():
    s = SinogramStack(np.zeros((2, 4, 16)), equispaced_angles(4))
    with pytest.raises(ValidationError):
        ring_removal_wavelet_fourier(s, 3, "haar", 2.0)
    with pytest.raises(ValidationError):
        ring_removal_wavelet_fourier(s, 1, "coif3", 2.0)
    assert ring_removal_wavelet_fourier(s, 2, "haar", 2.0).shape == s.shape


def test_median_denoise_keeps_constant_slices():
    v = Volume(np.full((2, 8, 8), 3.0))
    np.testing.assert_array_equal(median_denoise(v, 3).data, v.data)


def _brute_median(slice_2d, size):
    half = size // 2
    padded = np.pad(slice_2d, half, mode="symmetric")
    out = np.empty_like(slice_2d)
    for y in range(slice_2d.shape[0]):
        for x in range(slice_2d.shape[1]):
            out[y, x] = np.median(padded[y:y + size, x:x + size])
    return out


def test_median_denoise_removes_an_impulse():
    data = np.zeros((1, 8, 8))
    data[0, 3, 4] = 1.0
    out = median_denoise(Volume(data), 3).data
    assert not out.any()


def test_median_denoise_matches_brute_force_on_a_checkerboard():
    board = (np.add.outer(np.arange(8), np.arange(8)) % 2).astype(np.float64)
    out = median_denoise(Volume(board[None]), 3).data[0]
    np.testing.assert_array_equal(out, _brute_median(board, 3))
    # interior pixels see five of their own colour
    np.testing.assert_array_equal(out[1:-1, 1:-1], board[1:-1, 1:-1])


def test_run_chain_returns_domain_specific_output():
    p = _smooth_projections()
    params = ClassicalParams(level=2, wavelet="haar")
    assert isinstance(run_chain(p, params, domain="projection"), ProjectionStack)
    r = run_chain(p, ClassicalParams(level=2, wavelet="haar", denoise_size=3))
    assert isinstance(r, Volume)
    assert r.shape == (3, 16, 16)
    with pytest.raises(ValidationError):
        run_chain(p, params, domain="sinogram")


def test_params_round_trip_and_reject_unknown_fields():
    params = ClassicalParams(dif=0.2, size=5, level=2, wavelet="sym5", sigma=1.0)
    assert ClassicalParams.from_dict(params.to_dict()) == params
    with pytest.raises(ValidationError):
        ClassicalParams.from_dict({"dif": 0.2, "kernel": 3})
    with pytest.raises(ValidationError):
        ClassicalParams(wavelet="coif3").validate()


def test_presets_and_default_grid_are_valid():
    for params in PRESETS.values():
        params.validate()
    grid = default_grid()
    assert len(grid) == 3 * 2 * 3 * 3 * 4
    assert len(set(grid)) == len(grid)


def test_grid_search_finds_the_generating_parameters():
    rng = np.random.default_rng(3)
    p = ProjectionStack(rng.random((8, 2, 16)), equispaced_angles(8))
    without = ClassicalParams(level=1, wavelet="haar", destripe=False)
    with_destripe = ClassicalParams(level=1, wavelet="haar", destripe=True)
    reference = run_chain(p, with_destripe, domain="projection")
    best, table = grid_search([without, with_destripe], p, reference)
    assert best == with_destripe
    assert [prm for prm, _ in table] == [without, with_destripe]
    assert table[1][1] == 0.0
    threaded, _ = grid_search([without, with_destripe], p, reference, workers=2)
    assert threaded == best


def _striped_projections():
    rng = np.random.default_rng(6)
    base = _smooth_projections(n_theta=8, rows=2, cols=16).data
    stripes = rng.normal(0.0, 0.2, (1, 2, 16))
    return ProjectionStack(base + stripes, equispaced_angles(8))


def test_grid_search_agrees_with_exhaustive_loop():
    p = _striped_projections()
    reference = _smooth_projections(n_theta=8, rows=2, cols=16)
    grid = [ClassicalParams(level=lv, wavelet="haar", sigma=sg) for lv in (1, 2) for sg in (1.0, 4.0)]
    scores = [float(np.mean((run_chain(p, prm, "projection").data - reference.data) ** 2)) for prm in grid]
    best, table = grid_search(grid, p, reference)
    assert [mse for _, mse in table] == scores
    assert best == grid[scores.index(min(scores))]


def test_grid_search_breaks_exact_ties_by_grid_order():
    p = _striped_projections()
    a = ClassicalParams(level=1, wavelet="haar", sigma=1.0, destripe=False)
    b = ClassicalParams(level=1, wavelet="haar", sigma=4.0, destripe=False)
    c = ClassicalParams(level=1, wavelet="haar", sigma=2.0)
    reference = run_chain(p, a, "projection")
    best, table = grid_search([c, a, b], p, reference)
    assert table[1][1] == table[2][1] == 0.0
    assert best == a
    assert grid_search([c, b, a], p, reference)[0] == b


def test_grid_search_validates_inputs():
    p = _smooth_projections()
    with pytest.raises(ValidationError):
        grid_search([], p, p)
    with pytest.raises(ValidationError):
        grid_search([ClassicalParams(level=1)], p, _smooth_projections(n_theta=4))
    with pytest.raises(ValidationError):
        grid_search([ClassicalParams(level=1)], p, Volume(np.zeros((3, 16, 8))), domain="reconstruction")
    with pytest.raises(ValidationError):
        grid_search([ClassicalParams(level=1)], p, p, domain="sinogram")
    volume_ref = Volume(np.zeros((3, 16, 16)))
    best, _ = grid_search([ClassicalParams(level=1, wavelet="haar")], p, volume_ref, domain="reconstruction")
    assert best.level == 1


def test_score_table_and_grid_file(tmp_path):
    p = _smooth_projections()
    grid = [ClassicalParams(level=1, wavelet="haar"), ClassicalParams(level=2, wavelet="db2")]
    _, table = grid_search(grid, p, p)
    path = write_score_table(table, tmp_path / "scores.csv")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    assert rows[1]["wavelet"] == "db2"
    assert rows[0]["denoise_size"] == ""

    (tmp_path / "grid.json").write_text(json.dumps([g.to_dict() for g in grid]), encoding="utf-8")
    assert load_grid(tmp_path / "grid.json") == grid
    (tmp_path / "preset.json").write_text(json.dumps({"preset": "grid"}), encoding="utf-8")
    assert load_grid(tmp_path / "preset.json") == [PRESETS["grid"]]
    (tmp_path / "unknown.json").write_text(json.dumps({"preset": "best"}), encoding="utf-8")
    with pytest.raises(ValidationError):
        load_grid(tmp_path / "unknown.json")
    with pytest.raises(PersistenceError):
        load_grid(tmp_path / "missing.json")
