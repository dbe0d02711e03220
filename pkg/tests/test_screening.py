import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hclmp.composition import Composition, ElementTrio
from hclmp.curation import SpectraTable, SpectrumRecord
from hclmp.screening import (RGB_WINDOWS, ScreenCriteria, bandgap_screen, export_embedding, quantile_rgb,
                             register_reducer, screen_spaces, transparency_screen)


def spec(high, low, mid=0.0):
    s = np.full(10, mid)
    s[[0, 1, 2, 3]] = low
    s[[5, 6, 7]] = high
    return s


def test_criteria_validation():
    with pytest.raises(ValueError):
        ScreenCriteria(high_window=(3, 4), low_window=(0, 3))
    with pytest.raises(ValueError):
        ScreenCriteria(high_window=(10,))
    with pytest.raises(ValueError):
        ScreenCriteria(ratio=0)
    with pytest.raises(ValueError):
        ScreenCriteria(low_window=())


def test_criteria_round_trip_and_ev():
    c = ScreenCriteria()
    d = c.to_dict()
    assert ScreenCriteria.from_dict(d) == c
    assert d["high_window_ev"][0] == pytest.approx(1.39 + 5 * (3.11 - 1.39) / 9)


@given(st.floats(0.0, 10.0), st.floats(1e-3, 10.0))
def test_bandgap_matches_definition(high, low):
    s = spec(high, low)
    expected = high > 0.2 and high >= 5 * low
    if abs(high - 5 * low) > 1e-9 and abs(high - 0.2) > 1e-9:
        assert bandgap_screen(s) == expected


def test_bandgap_shape_check():
    with pytest.raises(ValueError):
        bandgap_screen(np.zeros(9))


def test_transparency_fraction_boundary():
    s = np.full(10, 0.1)
    assert transparency_screen(s, Composition({"Bi": 0.5, "Fe": 0.5}), "Bi")
    assert not transparency_screen(s, Composition({"Bi": 0.4, "Fe": 0.6}), "Bi")
    assert not transparency_screen(s, Composition({"Fe": 1}), "Bi")


def _table(rows):
    return SpectraTable(SpectrumRecord(Composition(c), v) for c, v in rows)


def test_screen_spaces_grouping_and_novelty():
    good, bad = spec(1.0, 0.1), spec(0.1, 0.1)
    items = _table([
        ({"Ag": 0.2, "Bi": 0.3, "Fe": 0.5}, good),
        ({"Ag": 0.4, "Bi": 0.3, "Fe": 0.3}, bad),
        ({"Ag": 0.2, "Bi": 0.3, "Mn": 0.5}, good),
        ({"Ag": 0.2, "Co": 0.3, "Mn": 0.5}, bad),
        ({"Ag": 0.5, "Bi": 0.5}, good),
    ])
    reference = _table([({"Ag": 0.5, "Mn": 0.5}, good), ({"Ag": 0.5, "Fe": 0.5}, bad), ({"Fe": 1.0}, good)])
    rep = screen_spaces(items, reference)
    assert rep.n_screened == 4
    by = {r.trio.name: r for r in rep.results}
    assert sorted(by) == ["Ag-Bi-Fe", "Ag-Bi-Mn"]
    assert by["Ag-Bi-Fe"].subspace_novel
    assert not by["Ag-Bi-Mn"].subspace_novel
    assert [c.key for c in by["Ag-Bi-Mn"].passing_subspace] == ["Ag:0.5,Mn:0.5"]
    assert rep.summary == {"screened_compositions": 4, "passing_compositions": 2,
                           "passing_spaces": 2, "subspace_novel_spaces": 1}
    only = screen_spaces(items, reference, trios=[ElementTrio("Ag", "Bi", "Fe")])
    assert [r.trio.name for r in only.results] == ["Ag-Bi-Fe"] and only.n_screened == 2


def test_screen_report_write(tmp_path):
    items = _table([({"Ag": 0.2, "Bi": 0.3, "Fe": 0.5}, spec(1.0, 0.1))])
    rep = screen_spaces(items, _table([]))
    rep.write(tmp_path)
    with open(tmp_path / "passing.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["trio", "composition", "subspace_novel"]
    assert rows[1][0] == "Ag-Bi-Fe" and rows[1][2] == "1"


@settings(max_examples=40)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.just(10)), elements=st.floats(-5, 5)))
def test_quantile_rgb_properties(x):
    rgb = quantile_rgb(x)
    assert rgb.shape == (len(x), 3)
    assert rgb.min() >= 0 and rgb.max() <= 1
    for k, window in enumerate(RGB_WINDOWS):
        m = x[:, list(window)].mean(1)
        order = np.argsort(m, kind="stable")
        assert np.all(np.diff(rgb[order, k]) >= -1e-12)
        ties = m[:, None] == m[None, :]
        assert np.all(np.abs(rgb[:, k][:, None] - rgb[:, k][None, :])[ties] == 0)


def test_quantile_rgb_distinct_values_uniform():
    x = np.zeros((5, 10))
    x[:, 0] = [3, 1, 4, 0, 2]
    np.testing.assert_allclose(quantile_rgb(x)[:, 0], [0.75, 0.25, 1.0, 0.0, 0.5])


def test_quantile_rgb_needs_two():
    with pytest.raises(ValueError):
        quantile_rgb(np.zeros((1, 10)))


def _sets():
    rng = np.random.default_rng(0)
    comps = [Composition({"Ag": a, "Bi": 1 - a - 0.1, "Fe": 0.1}) for a in np.linspace(0.1, 0.8, 8)]
    return {"measured": [(c, rng.random(10)) for c in comps[:4]],
            "predicted": [(c, rng.random(10)) for c in comps[4:]]}


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_embedding_colors_only(tmp_path):
    ok = export_embedding(_sets(), tmp_path / "e.csv", reducer=None)
    rows = _read(tmp_path / "e.csv")
    assert not ok
    assert len(rows) == 8 and all(r["x"] == "" for r in rows)
    assert [r["set"] for r in rows] == ["measured"] * 4 + ["predicted"] * 4


def test_embedding_custom_reducer(tmp_path):
    register_reducer("first2", lambda x, seed=0, **kw: x[:, :2])
    assert export_embedding(_sets(), tmp_path / "e.csv", reducer="first2")
    rows = _read(tmp_path / "e.csv")
    x = np.vstack([v for s in _sets().values() for _, v in s])
    np.testing.assert_allclose([float(r["x"]) for r in rows], x[:, 0])


def test_embedding_reducer_import_error(tmp_path):
    def missing(x, **kw):
        raise ImportError("no backend")
    register_reducer("missing", missing)
    assert not export_embedding(_sets(), tmp_path / "e.csv", reducer="missing")


def test_embedding_tsne(tmp_path):
    assert export_embedding(_sets(), tmp_path / "e.csv", reducer="tsne",
                            reducer_config={"perplexity": 2.0, "max_iter": 250})
    assert all(r["x"] for r in _read(tmp_path / "e.csv"))
