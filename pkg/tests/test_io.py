import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qtraj import io
from qtraj.core import BlochState, Drive, PhysicalParams, VoltageRecord
from qtraj.simulator import SimRegime, generate_dataset

P0 = PhysicalParams()


@pytest.fixture(scope="module")
def dataset():
    p = P0.with_omega(0.6 * P0.kappa / 2)
    return generate_dataset(p, SimRegime("kernel", 4), 2, [0.0, 0.2e-6, 0.6e-6])


def test_dataset_roundtrip(tmp_path, dataset):
    m = io.write_dataset(tmp_path, dataset, {"a": 1}, seed=4)
    back = io.read_dataset(tmp_path, require_truth=True)
    assert m["hash"] == io.manifest_hash({"a": 1}, 4)
    assert len(back) == len(dataset)
    for a, b in zip(dataset.records, back.records):
        assert a.id == b.id and a.tomo_axis == b.tomo_axis and a.tomo_outcome == b.tomo_outcome
        assert np.array_equal(a.i, b.i) and np.array_equal(a.q, b.q)
        assert a.t_m == b.t_m and a.dt == b.dt and len(a) == len(b)
        assert a.init_state == b.init_state and a.drive == b.drive
        assert np.array_equal(dataset.truth[a.id].states, back.truth[a.id].states)
    assert back.params == dataset.params
    assert back.regime == dataset.regime


def test_missing_truth_sidecar(tmp_path, dataset):
    io.write_dataset(tmp_path, dataset)
    (tmp_path / io.TRUTH_FILE).unlink()
    with pytest.raises(FileNotFoundError):
        io.read_dataset(tmp_path)
    with pytest.raises(FileNotFoundError):
        io.read_dataset(tmp_path / "nowhere")


def test_schema_version_checked(tmp_path, dataset):
    d = io.record_to_dict(dataset.records[1])
    d["schema_version"] = 7
    with pytest.raises(io.SchemaError):
        io.record_from_dict(d)
    d = io.record_to_dict(dataset.records[1])
    del d["dt"]
    with pytest.raises(io.SchemaError):
        io.record_from_dict(d)
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    with pytest.raises(io.SchemaError):
        io.read_records(tmp_path / "bad.jsonl")


def test_unpadded_storage(dataset):
    r = dataset.records[-1]
    d = io.record_to_dict(r)
    assert len(d["i_samples"]) == r.n_steps
    assert d["length"] == len(r)


def test_sinusoidal_drive_roundtrip():
    p = PhysicalParams(omega_rabi=Drive(1e6, 5e5, 1.8e-6, 0.3))
    rec = generate_dataset(p, SimRegime("kernel", 0), 1, [0.4e-6], axes=("Z",)).records[0]
    back = io.record_from_dict(json.loads(json.dumps(io.record_to_dict(rec))))
    assert back.drive == rec.drive


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=5),
       st.integers(-10 ** 12, 10 ** 12), st.text(alphabet="abcxyz_", min_size=1, max_size=6))
def test_csv_roundtrip(tmp_path_factory, xs, k, s):
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    rows = [{"x": x, "k": k, "s": s} for x in xs]
    io.write_csv(path, rows, manifest="abc123")
    back = io.read_csv(path)
    assert io.csv_manifest(path) == "abc123"
    for a, b in zip(rows, back):
        assert b["k"] == a["k"] and b["s"] == a["s"]
        assert float(b["x"]) == a["x"]


def test_csv_requires_metadata(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(io.SchemaError):
        io.read_csv(tmp_path / "x.csv")


def test_manifest_hash_stable():
    a = io.manifest_hash({"b": 1, "a": [1, 2]}, 3)
    b = io.manifest_hash({"a": [1, 2], "b": 1}, 3)
    assert a == b and len(a) == 16
    assert io.manifest_hash({"a": 1}, 3) != io.manifest_hash({"a": 1}, 4)
    assert io.manifest_hash({"a": 1}, 3) != io.manifest_hash({"a": 1}, 3, code_version="9")


def test_coarse_grain_mean_and_variance(rng):
    n, k = 4000, 4
    rec = VoltageRecord(i=rng.standard_normal(n), q=rng.standard_normal(n), dt=1e-9, t_m=n * 1e-9,
                        init_state=BlochState(0, 0, 1))
    cg = io.coarse_grain(rec, k)
    assert cg.n_steps == n // k and cg.dt == pytest.approx(k * 1e-9)
    assert np.allclose(cg.i, rec.i.reshape(-1, k).mean(1))
    assert cg.i.var() == pytest.approx(1 / k, rel=0.1)
    assert io.coarse_grain(rec, 1) is rec


def test_coarse_grain_remainder_warns():
    rec = VoltageRecord(i=np.arange(10.0), q=np.zeros(10), dt=1e-9, t_m=10e-9, init_state=BlochState(0, 0, 1))
    with pytest.warns(UserWarning):
        cg = io.coarse_grain(rec, 4)
    assert cg.n_steps == 2 and np.allclose(cg.i[:2], [1.5, 5.5])
    with pytest.raises(ValueError):
        io.coarse_grain(rec, 0)


def test_run_config_roundtrip(tmp_path):
    cfg = io.RunConfig(n=7, regime="kernel", window=2e-7, params=P0.with_omega(1e6))
    path = tmp_path / "c.json"
    cfg.save(path)
    back = io.RunConfig.load(path)
    assert back == cfg
    assert back.hash() == cfg.hash()
    assert cfg.with_overrides(out="elsewhere").hash() == cfg.hash()
    assert cfg.with_overrides(seed=1).hash() != cfg.hash()
    with pytest.raises(io.SchemaError):
        io.RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        io.RunConfig(variant="magic")


def test_worker_count(monkeypatch):
    monkeypatch.setenv("TRAJ_THREADS", "1")
    assert io.worker_count() == 1
    monkeypatch.setenv("TRAJ_THREADS", "zero")
    with pytest.raises(ValueError):
        io.worker_count()
    monkeypatch.delenv("TRAJ_THREADS")
    assert io.worker_count() >= 1
