import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hclmp import synthetic
from hclmp.composition import Composition, ElementTrio, TrioRelation, classify_against_trio
from hclmp.curation import (CHANNEL_COLUMNS, DataError, DataInstance, SpectraTable, SpectrumRecord,
                            build_instance, build_random_setting, deployment_instance, destandardize,
                            enumerate_prediction_spaces, fit_standardizer, identify_data_instances,
                            ingest_spectra, random_instance, standardize, trio_grid_records, write_spectra)

from conftest import ABF, ABM


def test_write_ingest_round_trip(tmp_path, small_table):
    path = tmp_path / "s.csv"
    write_spectra(path, ((r.composition, r.absorption) for r in small_table))
    again = ingest_spectra(path)
    assert len(again) == len(small_table)
    for r in small_table:
        np.testing.assert_array_equal(again[r.key].absorption, r.absorption)


def test_ingest_averages_duplicates(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("composition," + ",".join(CHANNEL_COLUMNS) + "\n"
                    + "\"Fe:0.5,Bi:0.5\"," + ",".join(["1"] * 10) + "\n"
                    + "\"Bi:1,Fe:1\"," + ",".join(["3"] * 10) + "\n")
    t = ingest_spectra(path)
    assert len(t) == 1
    np.testing.assert_allclose(t[Composition({"Bi": 1, "Fe": 1})].absorption, 2.0)


@pytest.mark.parametrize("body", [
    "composition,E01\nFe:1,1\n",
    "comp," + ",".join(CHANNEL_COLUMNS) + "\n",
    "composition," + ",".join(CHANNEL_COLUMNS) + "\nFe:1," + ",".join(["1"] * 9) + "\n",
    "composition," + ",".join(CHANNEL_COLUMNS) + "\nQq:1," + ",".join(["1"] * 10) + "\n",
    "composition," + ",".join(CHANNEL_COLUMNS) + "\nFe:1," + ",".join(["x"] * 10) + "\n",
])
def test_ingest_rejects_malformed(tmp_path, body):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(DataError):
        ingest_spectra(path)


def test_table_rejects_duplicates():
    r = SpectrumRecord(Composition({"Fe": 1}), np.zeros(10))
    with pytest.raises(DataError):
        SpectraTable([r, r])


def test_record_is_read_only():
    r = SpectrumRecord(Composition({"Fe": 1}), np.zeros(10))
    with pytest.raises(ValueError):
        r.absorption[0] = 1.0


@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_standardizer_round_trip(n, seed):
    x = np.random.default_rng(seed).normal(3.0, 2.0, (n, 10))
    s = fit_standardizer(x)
    np.testing.assert_allclose(destandardize(s, standardize(s, x)), x, atol=1e-9)
    z = standardize(s, x)
    np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.std(0), 1.0, atol=1e-9)


def test_standardizer_degenerate_channel():
    x = np.random.default_rng(0).normal(size=(5, 10))
    x[:, 3] = 1.0
    with pytest.raises(DataError, match="channel 3"):
        fit_standardizer(x)
    s = fit_standardizer(x, allow_degenerate=True)
    assert s.std[3] == 1.0


def test_eligibility_thresholds(small_world):
    # 36 interior points; dropping 10 leaves 26 (eligible), dropping 11 leaves 25 (not)
    ok = synthetic.make_spectra_table(small_world, [ABF], drop_interior={ABF: 10})
    assert identify_data_instances(ok) == [ABF]
    short = synthetic.make_spectra_table(small_world, [ABF], drop_interior={ABF: 11})
    assert identify_data_instances(short) == []
    with pytest.raises(DataError):
        build_instance(short, ABF)


def test_perimeter_threshold(small_world):
    table = synthetic.make_spectra_table(small_world, [ABF])
    interior, perimeter = trio_grid_records(table, ABF)
    assert (len(interior), len(perimeter)) == (36, 30)
    keep = {r.key for r in perimeter[:24]}
    drop = {r.key for r in perimeter} - keep
    thin = SpectraTable(r for r in table if r.key not in drop)
    assert identify_data_instances(thin) == []


def test_instance_structure(small_table, small_instance):
    inst = small_instance
    assert len(inst.test) == 36
    assert all(classify_against_trio(r.composition, ABF) is TrioRelation.CONTAINS_ALL_THREE for r in inst.test)
    pool = inst.train + inst.validation
    assert len(pool) == len(small_table) - 36
    assert not {r.key for r in inst.train} & {r.key for r in inst.validation}
    assert len(inst.validation) == round(0.1 * len(pool))
    # the other trio's interior is training data
    assert any(r.composition.elements == set(ABM.elements) for r in pool)


def test_validation_prefers_pair_records(small_table, small_instance):
    pair = [r for r in small_instance.train + small_instance.validation
            if len(r.composition.elements & set(ABF.elements)) == 2]
    n_val = len(small_instance.validation)
    in_val = [r for r in small_instance.validation if len(r.composition.elements & set(ABF.elements)) == 2]
    assert len(in_val) == min(n_val, len(pair))


def test_scaler_fitted_on_train_only(small_instance):
    s = fit_standardizer(small_instance.train)
    np.testing.assert_array_equal(s.mean, small_instance.scaler.mean)
    np.testing.assert_array_equal(s.std, small_instance.scaler.std)


def test_manifest_round_trip(tmp_path, small_table, small_instance):
    path = tmp_path / "m.json"
    small_instance.write_manifest(path)
    again = DataInstance.from_manifest(small_table, json.loads(path.read_text()))
    assert again.manifest() == small_instance.manifest()


def test_manifest_missing_record(small_instance):
    table = SpectraTable(small_instance.train)
    with pytest.raises(DataError):
        DataInstance.from_manifest(table, small_instance.manifest())


def test_build_instance_deterministic(small_table):
    a = build_instance(small_table, ABF, seed=3).manifest()
    b = build_instance(small_table, ABF, seed=3).manifest()
    assert a == b


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_random_setting_partition(seed):
    world = synthetic.make_world(("Ag", "Bi", "Fe", "Mn"), seed=0)
    table = synthetic.make_spectra_table(world, [ABF, ABM])
    split = build_random_setting(table, [ABF, ABM], seed=seed)
    keys = [r.key for part in split for r in part]
    assert len(keys) == len(set(keys)) == len(table)
    assert len(split.test) == round(0.3 * 72)
    assert all(len(r.composition) == 3 for r in split.test)
    assert len(split.validation) == round(0.1 * (len(table) - len(split.test)))


def test_random_instance_named(small_table):
    inst = random_instance(small_table, [ABF, ABM], seed=0)
    assert inst.trio is None and inst.name == "random"


def test_prediction_spaces():
    els = ["Ag", "Bi", "Fe", "Mn", "Co"]
    known = [ABF]
    spaces = enumerate_prediction_spaces(els, known)
    assert len(spaces) == 10 - 1
    assert ABF not in spaces


def test_deployment_instance(small_table):
    inst = deployment_instance(small_table)
    assert inst.test == []
    assert len(inst.train) + len(inst.validation) == len(small_table)


def test_instance_rejects_unknown_trio(small_table):
    with pytest.raises(DataError):
        build_instance(small_table, ElementTrio("Ag", "Fe", "Mn"))
