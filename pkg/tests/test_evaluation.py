import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hclmp import synthetic
from hclmp.baselines import lininterp_fit
from hclmp.curation import DataError, Standardizer, build_instance
from hclmp.evaluation import ModelSpec, aggregate, export_ternary, run_benchmark, standardized_mae

from conftest import ABF, ABM


@settings(max_examples=30)
@given(st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_standardized_mae_keyed_matches_arrays(n, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(n, 10)), rng.normal(size=(n, 10))
    s = Standardizer(np.zeros(10), rng.uniform(0.5, 2.0, 10))
    keys = [f"k{i}" for i in range(n)]
    perm = rng.permutation(n)
    keyed_p = {keys[i]: p[i] for i in perm}
    keyed_t = {keys[i]: t[i] for i in range(n)}
    a = standardized_mae(p, t, s)
    b = standardized_mae(keyed_p, keyed_t, s)
    np.testing.assert_allclose(a, b, atol=1e-15)
    np.testing.assert_allclose(a, np.abs(p - t).mean(0) / s.std, atol=1e-15)


def test_standardized_mae_key_mismatch():
    s = Standardizer(np.zeros(10), np.ones(10))
    with pytest.raises(DataError):
        standardized_mae({"a": np.zeros(10)}, {"b": np.zeros(10)}, s)
    with pytest.raises(DataError):
        standardized_mae(np.zeros((2, 10)), np.zeros((2, 10)), s, keys=["a"])
    with pytest.raises(DataError):
        standardized_mae(np.zeros((2, 5)), np.zeros((2, 5)), s)


def test_aggregate_unweighted():
    cells = {("m", "i1"): np.full(10, 1.0), ("m", "i2"): np.full(10, 3.0)}
    rep = aggregate(cells)
    assert rep.curves["m"] == [2.0] * 10
    assert rep.scalars["m"] == 2.0
    with pytest.raises(DataError):
        aggregate(cells, ["m", "other"])


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("x", "forest")
    with pytest.raises(ValueError):
        ModelSpec("x", "external")
    with pytest.raises(ValueError):
        ModelSpec("x", "hclmp", {"latent": 3})
    a = ModelSpec("x", "hclmp", {"epochs": 2})
    assert a.config_hash() == ModelSpec("y", "hclmp", {"epochs": 2}).config_hash()
    assert a.config_hash() != ModelSpec("x", "hclmp", {"epochs": 3}).config_hash()
    assert ModelSpec("t", "hclmp", {"use_transfer": True}).uses_transfer
    assert ModelSpec("w", "mlp", {"warm_up": True}).uses_dos


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_export_ternary(tmp_path, small_instance):
    n = export_ternary(tmp_path / "t.csv", small_instance, 6)
    rows = _rows(tmp_path / "t.csv")
    assert n == len(rows) == 36 + 30
    assert sum(r["region"] == "interior" for r in rows) == 36
    pred = np.zeros((36, 10))
    assert export_ternary(tmp_path / "p.csv", small_instance, 0, pred) == 36
    with pytest.raises(ValueError):
        export_ternary(tmp_path / "x.csv", small_instance, 10)
    with pytest.raises(DataError):
        export_ternary(tmp_path / "x.csv", small_instance, 0, pred[:3])


def test_benchmark_lininterp_loco(tmp_path, small_table):
    rep = run_benchmark(small_table, [ModelSpec("LinInterp", "lininterp")], "loco", [0], out_dir=tmp_path,
                        export_channel=6)
    assert rep.instances == [ABF.name, ABM.name]
    inst = build_instance(small_table, ABF)
    pred = lininterp_fit(ABF, inst.train + inst.validation).predict([r.composition for r in inst.test])
    truth = np.stack([r.absorption for r in inst.test])
    np.testing.assert_allclose(rep.cells["LinInterp"][ABF.name], standardized_mae(pred, truth, inst.scaler))
    for f in ("report.json", "instance_mae.csv", "curves.csv"):
        assert (tmp_path / f).exists()
    assert (tmp_path / "ternary" / f"{ABF.name}__truth.csv").exists()
    assert (tmp_path / "ternary" / f"{ABF.name}__LinInterp.csv").exists()
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["energy_grid_ev"]) == 10 and report["channels"][0] == "E01"


def test_benchmark_random_setting(small_table):
    rep = run_benchmark(small_table, [ModelSpec("LinInterp", "lininterp")], "random", [0, 1], trios=[ABF, ABM])
    assert rep.instances == ["random"]
    assert len(rep.per_seed_scalars["LinInterp"]) == 2
    assert rep.scalars["LinInterp"] == pytest.approx(np.mean(rep.per_seed_scalars["LinInterp"]))


def test_benchmark_failed_cells_excluded(tmp_path, small_table):
    inst = build_instance(small_table, ABF)
    from hclmp.curation import write_spectra
    write_spectra(tmp_path / f"{ABF.name}.csv", ((r.composition, r.absorption) for r in inst.test))
    roster = [ModelSpec("LinInterp", "lininterp"), ModelSpec("Ext", "external", path=str(tmp_path / "{instance}.csv"))]
    rep = run_benchmark(small_table, roster, "loco", [0])
    assert not rep.complete
    assert list(rep.failed["Ext"]) == [f"{ABM.name}@seed0"]
    assert rep.instances == [ABF.name]
    assert rep.scalars["Ext"] == 0.0


def test_benchmark_requires_generator(small_table):
    with pytest.raises(ValueError):
        run_benchmark(small_table, [ModelSpec("T", "hclmp", {"use_transfer": True})], "loco")
    with pytest.raises(ValueError):
        run_benchmark(small_table, [ModelSpec("A", "lininterp"), ModelSpec("A", "lininterp")], "loco")


def test_benchmark_workers_match_serial(small_table):
    roster = [ModelSpec("LinInterp", "lininterp"),
              ModelSpec("MLP", "mlp", {"hidden_widths": [16], "epochs": 2})]
    a = run_benchmark(small_table, roster, "loco", [0], workers=1)
    b = run_benchmark(small_table, roster, "loco", [0], workers=2)
    assert a.to_json() == b.to_json()


def test_benchmark_no_instances(small_world):
    table = synthetic.make_spectra_table(small_world, [])
    with pytest.raises(DataError):
        run_benchmark(table, [ModelSpec("LinInterp", "lininterp")], "loco")
