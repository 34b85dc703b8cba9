import json
import math

import numpy as np
import pytest

from ct_tools.datamodel import (
    ROLE_HIGH_QUALITY,
    ROLE_LOW_QUALITY,
    CorruptFileError,
    DatasetManifest,
    PersistenceError,
    ProjectionStack,
    Rng,
    SinogramStack,
    ValidationError,
    Volume,
    load_array,
    load_projections,
    load_volume,
    rng_normal,
    rng_poisson,
    rng_uniform,
    save_array,
)
from ct_tools.geometry_tool import equispaced_angles


def _projections(n_theta=4, rows=3, cols=5, seed=0):
    data = np.random.default_rng(seed).random((n_theta, rows, cols))
    return ProjectionStack(data, equispaced_angles(n_theta))


def test_stacks_validate_shape_and_values():
    with pytest.raises(ValidationError):
        ProjectionStack(np.zeros((4, 3)), equispaced_angles(4))
    with pytest.raises(ValidationError):
        ProjectionStack(np.zeros((0, 3, 3)), [])
    bad = np.zeros((2, 3, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        ProjectionStack(bad, equispaced_angles(2))


def test_angles_must_be_increasing_within_half_turn():
    with pytest.raises(ValidationError):
        ProjectionStack(np.zeros((2, 3, 3)), [0.5, 0.1])
    with pytest.raises(ValidationError):
        ProjectionStack(np.zeros((2, 3, 3)), [0.0, math.pi])
    with pytest.raises(ValidationError):
        SinogramStack(np.zeros((3, 2, 3)), [0.0])


def test_stack_data_is_read_only():
    p = _projections()
    with pytest.raises(ValueError):
        p.data[0, 0, 0] = 1.0
    assert p.n_theta == 4
    assert p.shape == (4, 3, 5)


def test_masked_volume_rejects_values_outside_circle():
    data = np.ones((1, 8, 8))
    with pytest.raises(ValidationError):
        Volume(data, mask_applied=True)
    assert not Volume(data).mask_applied


def test_rng_is_reproducible_and_spawns_independent_streams():
    a = Rng(42).generator.random(5)
    b = Rng(42).generator.random(5)
    np.testing.assert_array_equal(a, b)
    child1 = Rng(42).spawn(1).generator.random(5)
    child2 = Rng(42).spawn(2).generator.random(5)
    assert not np.array_equal(child1, child2)
    assert not np.array_equal(child1, a)
    assert Rng(42).spawn(1, 3).describe() == {"algorithm": "PCG64", "seed": 42, "spawn_key": [1, 3]}


def test_rng_rejects_bad_seeds():
    with pytest.raises(ValidationError):
        Rng(-1)
    with pytest.raises(ValidationError):
        Rng(2 ** 64)


def test_rng_scalar_draws():
    rng = Rng(0)
    assert rng_uniform(rng, 2.0, 2.0) == 2.0
    assert 1.0 <= rng_uniform(rng, 1.0, 3.0) < 3.0
    assert rng_normal(rng, 5.0, 0.0) == 5.0
    assert rng_poisson(rng, 0.0) == 0
    assert rng_poisson(rng, 4.0) >= 0
    with pytest.raises(ValidationError):
        rng_uniform(rng, 3.0, 1.0)
    with pytest.raises(ValidationError):
        rng_normal(rng, 0.0, -1.0)
    with pytest.raises(ValidationError):
        rng_poisson(rng, -1.0)


def test_save_and_load_keep_float32_values_and_angles(tmp_path):
    p = _projections()
    path = save_array(p, tmp_path / "p.raw")
    arr, header = load_array(path)
    assert arr.dtype == np.float32
    np.testing.assert_array_equal(arr, p.data.astype(np.float32))
    assert header["axes"] == ["angle", "row", "column"]
    loaded = load_projections(path)
    np.testing.assert_allclose(loaded.angles, p.angles)
    assert (tmp_path / "p.raw").stat().st_size == 4 * 3 * 5 * 4


def test_volume_round_trip_keeps_mask_flag(tmp_path):
    v = Volume(np.zeros((2, 8, 8)), mask_applied=True)
    path = save_array(v, tmp_path / "v.raw")
    assert load_volume(path).mask_applied


def test_save_rejects_non_finite(tmp_path):
    with pytest.raises(ValidationError):
        save_array(np.full((1, 2, 2), np.inf), tmp_path / "x.raw")


def test_load_detects_missing_sidecar_and_truncated_payload(tmp_path):
    path = save_array(np.ones((2, 2, 2)), tmp_path / "x.raw")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CorruptFileError):
        load_array(path)
    (tmp_path / "x.raw.json").unlink()
    with pytest.raises(CorruptFileError):
        load_array(path)


def test_manifest_round_trip_and_open(tmp_path):
    manifest = DatasetManifest(seed=7, extra={"result": "p"})
    manifest.add_array("p", _projections(), tmp_path / "obj" / "p.raw", ROLE_LOW_QUALITY, base=tmp_path)
    manifest.add_array("v", Volume(np.ones((3, 5, 5))), tmp_path / "obj" / "v.raw", ROLE_HIGH_QUALITY,
                       base=tmp_path)
    manifest.save(tmp_path / "manifest.json")

    loaded = DatasetManifest.load(tmp_path / "manifest.json")
    assert loaded.seed == 7
    assert loaded.entries["p"].path == "obj/p.raw"
    assert loaded.entries["p"].kind == "projections"
    assert loaded.names(ROLE_HIGH_QUALITY) == ["v"]
    assert isinstance(loaded.open_entry("p", tmp_path), ProjectionStack)
    assert isinstance(loaded.open_entry("v", tmp_path), Volume)
    with pytest.raises(ValidationError):
        loaded.resolve("missing")


def test_manifest_save_is_byte_deterministic(tmp_path):
    for name in ("a", "b"):
        m = DatasetManifest(seed=1)
        m.add_array("p", _projections(), tmp_path / name / "p.raw", ROLE_LOW_QUALITY, base=tmp_path / name)
        m.save(tmp_path / name / "manifest.json")
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_manifest_load_errors(tmp_path):
    with pytest.raises(PersistenceError):
        DatasetManifest.load(tmp_path / "none.json")

    (tmp_path / "bad.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(CorruptFileError):
        DatasetManifest.load(tmp_path / "bad.json")

    (tmp_path / "old.json").write_text(json.dumps({"version": 99}), encoding="utf-8")
    with pytest.raises(CorruptFileError):
        DatasetManifest.load(tmp_path / "old.json")


def test_manifest_verify_catches_shape_drift(tmp_path):
    m = DatasetManifest()
    m.add_array("x", np.ones((2, 2, 2)), tmp_path / "x.raw", ROLE_LOW_QUALITY, base=tmp_path)
    m.entries["x"].shape = [2, 2, 3]
    m.save(tmp_path / "manifest.json")
    with pytest.raises(CorruptFileError):
        DatasetManifest.load(tmp_path / "manifest.json")
    assert DatasetManifest.load(tmp_path / "manifest.json", verify=False).entries["x"].shape == [2, 2, 3]


def test_manifest_rejects_unknown_role(tmp_path):
    with pytest.raises(ValidationError):
        DatasetManifest().add("x", tmp_path / "x.raw", "scratch", (1, 1, 1))


def test_equal_seeds_give_equal_long_sequences():
    a, b = Rng(17), Rng(17)
    n = 10 ** 5
    np.testing.assert_array_equal(a.generator.random(n), b.generator.random(n))
    np.testing.assert_array_equal(a.generator.normal(0.0, 1.0, n), b.generator.normal(0.0, 1.0, n))
    np.testing.assert_array_equal(a.generator.poisson(3.0, n), b.generator.poisson(3.0, n))
    scalar_a = [rng_normal(a, 0.0, 2.0) for _ in range(1000)]
    scalar_b = [rng_normal(b, 0.0, 2.0) for _ in range(1000)]
    assert scalar_a == scalar_b


def test_poisson_draws_match_mean_and_variance():
    draws = Rng(23).generator.poisson(100.0, 10 ** 6)
    assert abs(draws.mean() - 100.0) < 1.0
    assert abs(draws.var() - 100.0) < 1.0
    rng = Rng(24)
    scalar = np.array([rng_poisson(rng, 100.0) for _ in range(10 ** 4)])
    assert abs(scalar.mean() - 100.0) < 2.0
