import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hclmp import synthetic
from hclmp.baselines import (MlpBaselineConfig, build_mlp_baseline, import_external_predictions,
                             lininterp_fit, lininterp_predict, mlp_predict, mlp_train)
from hclmp.composition import Composition, ElementTrio, Region, enumerate_simplex_grid
from hclmp.curation import CHANNEL_COLUMNS, DataError, SpectrumRecord, build_instance, write_spectra

from conftest import ABF

vertex_values = arrays(np.float64, (3, 10), elements=st.floats(-5, 5))


def _affine_records(trio, V):
    return [SpectrumRecord(c, np.array([c.get(e) for e in trio.elements]) @ V)
            for c, _ in enumerate_simplex_grid(trio)]


@settings(max_examples=25, deadline=None)
@given(vertex_values)
def test_lininterp_exact_on_affine(V):
    recs = _affine_records(ABF, V)
    model = lininterp_fit(ABF, recs)
    interior = [r for r, (_, reg) in zip(recs, enumerate_simplex_grid(ABF)) if reg is Region.INTERIOR]
    pred, outside = model.predict_with_flags([r.composition for r in interior])
    assert not outside.any()
    np.testing.assert_allclose(pred, np.stack([r.absorption for r in interior]), atol=1e-9)


def test_lininterp_ignores_interior_records():
    rng = np.random.default_rng(0)
    recs = _affine_records(ABF, rng.normal(size=(3, 10)))
    noisy = [SpectrumRecord(r.composition, r.absorption + 100) if len(r.composition) == 3 else r for r in recs]
    a = lininterp_fit(ABF, recs)
    b = lininterp_fit(ABF, noisy)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.values, b.values)
    assert len(a.points) == 30


def test_lininterp_reproduces_perimeter():
    rng = np.random.default_rng(1)
    recs = [SpectrumRecord(c, rng.normal(size=10)) for c, r in enumerate_simplex_grid(ABF) if r is Region.PERIMETER]
    model = lininterp_fit(ABF, recs)
    np.testing.assert_allclose(lininterp_predict(model, [r.composition for r in recs]),
                               np.stack([r.absorption for r in recs]), atol=1e-12)


def test_lininterp_out_of_hull_flag():
    # drop the Fe corner: points near it fall outside the hull and take the nearest value
    recs = [SpectrumRecord(c, np.full(10, c.get("Fe"))) for c, r in enumerate_simplex_grid(ABF)
            if r is Region.PERIMETER and c.get("Fe") < 0.95]
    model = lininterp_fit(ABF, recs)
    comps = [Composition({"Ag": 0.04, "Bi": 0.04, "Fe": 0.92}), Composition({"Ag": 0.4, "Bi": 0.3, "Fe": 0.3})]
    pred, outside = model.predict_with_flags(comps)
    assert outside.tolist() == [True, False]
    assert np.isfinite(pred).all()


def test_lininterp_degenerate():
    recs = [SpectrumRecord(Composition({"Ag": a, "Bi": 1 - a}), np.zeros(10)) for a in (0.2, 0.5, 0.8)]
    with pytest.raises(ValueError):
        lininterp_fit(ABF, recs)
    with pytest.raises(ValueError):
        lininterp_fit(ABF, recs[:2])


def test_lininterp_order_independent():
    rng = np.random.default_rng(2)
    recs = [SpectrumRecord(c, rng.normal(size=10)) for c, r in enumerate_simplex_grid(ABF) if r is Region.PERIMETER]
    comps = [c for c, r in enumerate_simplex_grid(ABF) if r is Region.INTERIOR]
    a = lininterp_fit(ABF, recs).predict(comps)
    b = lininterp_fit(ABF, recs[::-1]).predict(comps)
    np.testing.assert_array_equal(a, b)


def test_mlp_config():
    assert MlpBaselineConfig().hidden_widths == (512, 256, 128, 64)
    with pytest.raises(ValueError):
        MlpBaselineConfig.from_dict({"depth": 3})
    with pytest.raises(ValueError):
        MlpBaselineConfig(hidden_widths=())


def test_mlp_train_and_predict(small_instance):
    cfg = MlpBaselineConfig(hidden_widths=(32, 16), epochs=3)
    model = mlp_train(small_instance, cfg)
    pred = mlp_predict(model, [r.composition for r in small_instance.test])
    assert pred.shape == (36, 10)
    assert model.selected_epoch == 1 + int(np.argmin([r["val_mae"] for r in model.log]))
    again = mlp_train(small_instance, cfg)
    assert again.parameter_hash() == model.parameter_hash()


def test_mlp_warm_up_transfers_all_but_head(small_dos):
    universe = ["Ag", "Bi", "Fe", "Mn"]
    cold, _ = build_mlp_baseline(universe, MlpBaselineConfig(hidden_widths=(16, 8), seed=3))
    warm, log = build_mlp_baseline(universe, MlpBaselineConfig(hidden_widths=(16, 8), seed=3, warm_up=True,
                                                               warm_up_epochs=2), small_dos)
    assert len(log) == 2
    assert not np.array_equal(cold.body[0].weight.detach().numpy(), warm.body[0].weight.detach().numpy())
    np.testing.assert_array_equal(cold.head.weight.detach().numpy(), warm.head.weight.detach().numpy())


def test_mlp_warm_up_needs_dos(small_instance):
    with pytest.raises(ValueError):
        mlp_train(small_instance, MlpBaselineConfig(warm_up=True))


def _write_external(path, comps, values):
    write_spectra(path, zip(comps, values))


def test_external_predictions_aligned(tmp_path, small_instance):
    comps = [r.composition for r in small_instance.test]
    values = np.arange(36 * 10, dtype=float).reshape(36, 10)
    order = np.random.default_rng(0).permutation(36)
    _write_external(tmp_path / "p.csv", [comps[i] for i in order], values[order])
    np.testing.assert_array_equal(import_external_predictions(tmp_path / "p.csv", small_instance), values)


def test_external_predictions_errors(tmp_path, small_instance):
    comps = [r.composition for r in small_instance.test]
    v = np.zeros((36, 10))
    _write_external(tmp_path / "missing.csv", comps[:-1], v[:-1])
    with pytest.raises(DataError, match="missing"):
        import_external_predictions(tmp_path / "missing.csv", small_instance)
    _write_external(tmp_path / "extra.csv", comps + [Composition({"Ag": 1})], np.zeros((37, 10)))
    with pytest.raises(DataError, match="not in the test set"):
        import_external_predictions(tmp_path / "extra.csv", small_instance)
    _write_external(tmp_path / "dup.csv", comps + comps[:1], np.zeros((37, 10)))
    with pytest.raises(DataError, match="duplicate"):
        import_external_predictions(tmp_path / "dup.csv", small_instance)
    (tmp_path / "hdr.csv").write_text("comp," + ",".join(CHANNEL_COLUMNS) + "\n")
    with pytest.raises(DataError, match="header"):
        import_external_predictions(tmp_path / "hdr.csv", small_instance)


def test_lininterp_on_synthetic_instance(small_world):
    table = synthetic.make_spectra_table(small_world, [ABF])
    inst = build_instance(table, ABF)
    pred = lininterp_fit(ABF, inst.train + inst.validation).predict([r.composition for r in inst.test])
    assert pred.shape == (36, 10) and np.isfinite(pred).all()
    assert ElementTrio("Ag", "Bi", "Fe") == inst.trio
