"""Standardized-MAE metrics, aggregate reports, ternary exports and the benchmark runner."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import defaultdict
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import MlpBaselineConfig, import_external_predictions, lininterp_fit, mlp_train
from .composition import ElementTrio, TrioRelation, classify_against_trio, ternary_project
from .curation import (CHANNEL_COLUMNS, ENERGY_CENTERS, N_CHANNELS, DataError, DataInstance, SpectraTable,
                       Standardizer, build_instance, identify_data_instances, random_instance)
from .model import ModelConfig, train
from .transfer import DosRecord, TransferGenerator

log = logging.getLogger(__name__)

MODEL_KINDS = ("lininterp", "hclmp", "mlp", "external")


def _as_keyed(x, keys) -> dict[str, np.ndarray]:
    if isinstance(x, Mapping):
        return {k: np.asarray(v, dtype=float) for k, v in x.items()}
    arr = np.asarray(x, dtype=float)
    if keys is None:
        return {str(i): row for i, row in enumerate(arr)}
    if len(keys) != len(arr):
        raise DataError(f"{len(arr)} rows but {len(keys)} keys")
    return dict(zip(keys, arr))


def standardized_mae(pred, truth, scaler: Standardizer, keys: Sequence[str] | None = None) -> np.ndarray:
    """Per-channel mean |pred - truth| in units of the scaler's std.

    ``pred`` and ``truth`` are arrays (rows aligned, optionally labelled by
    ``keys``) or mappings from composition key to 10-vector; mappings must
    cover the same keys.
    """
    p = _as_keyed(pred, keys)
    t = _as_keyed(truth, keys)
    if set(p) != set(t):
        diff = sorted(set(p) ^ set(t))
        raise DataError(f"prediction/truth key mismatch, e.g. {diff[0]}")
    if not t:
        raise DataError("no test compositions")
    order = sorted(t)
    P = np.stack([p[k] for k in order])
    T = np.stack([t[k] for k in order])
    if P.shape != T.shape or P.shape[1] != N_CHANNELS:
        raise DataError(f"expected (n, {N_CHANNELS}) arrays, got {P.shape} and {T.shape}")
    return np.mean(np.abs(P - T), axis=0) / scaler.std


@dataclass
class EvaluationReport:
    setting: str
    models: list[str]
    instances: list[str]
    cells: dict[str, dict[str, list[float]]]  # model -> instance -> per-channel MAE
    curves: dict[str, list[float]]  # model -> per-channel mean over instances
    scalars: dict[str, float]  # model -> mean over channels of the curve
    failed: dict[str, dict[str, str]] = field(default_factory=dict)
    notes: dict[str, dict[str, dict]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    per_seed_scalars: dict[str, list[float | None]] = field(default_factory=dict)
    config_hashes: dict[str, str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not any(self.failed.values())

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "energy_grid_ev": [float(e) for e in ENERGY_CENTERS],
            "channels": CHANNEL_COLUMNS,
            "models": self.models,
            "instances": self.instances,
            "seeds": self.seeds,
            "cells": self.cells,
            "curves": self.curves,
            "scalars": self.scalars,
            "per_seed_scalars": self.per_seed_scalars,
            "failed": self.failed,
            "notes": self.notes,
            "config_hashes": self.config_hashes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        with (out / "instance_mae.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "instance", *CHANNEL_COLUMNS, "mean"])
            for m in self.models:
                for inst, v in sorted(self.cells.get(m, {}).items()):
                    w.writerow([m, inst, *map(repr, v), repr(float(np.mean(v)))])
        with (out / "curves.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["energy_ev", *self.models])
            for k, e in enumerate(ENERGY_CENTERS):
                w.writerow([repr(float(e)), *(repr(self.curves[m][k]) if m in self.curves else "" for m in self.models)])


def aggregate(cells: Mapping[tuple[str, str], Sequence[float]], models: Sequence[str] | None = None,
              instances: Sequence[str] | None = None, setting: str = "loco") -> EvaluationReport:
    """Unweighted mean over instances per channel, then over channels."""
    models = sorted({m for m, _ in cells}) if models is None else list(models)
    instances = sorted({i for _, i in cells}) if instances is None else list(instances)
    by_model: dict[str, dict[str, list[float]]] = {}
    for m in models:
        by_model[m] = {}
        for inst in instances:
            if (m, inst) not in cells:
                raise DataError(f"missing evaluation cell ({m}, {inst})")
            v = np.asarray(cells[(m, inst)], dtype=float)
            if v.shape != (N_CHANNELS,):
                raise DataError(f"cell ({m}, {inst}) has shape {v.shape}")
            by_model[m][inst] = [float(x) for x in v]
    curves, scalars = {}, {}
    for m in models:
        if not instances:
            continue
        curve = np.mean(np.array([by_model[m][i] for i in instances]), axis=0)
        curves[m] = [float(x) for x in curve]
        scalars[m] = float(np.mean(curve))
    return EvaluationReport(setting, list(models), list(instances), by_model, curves, scalars)


def export_ternary(path: str | Path, instance: DataInstance, channel: int,
                   predictions: np.ndarray | None = None) -> int:
    """Write ``x,y,value,region,composition`` rows for one channel; returns the row count.

    Without ``predictions`` the ground truth is written: the test interior
    plus the trio's perimeter records from the training pool. With
    predictions (aligned to ``instance.test``) only test rows are written.
    """
    if not 0 <= channel < N_CHANNELS:
        raise ValueError(f"channel index must be in [0, {N_CHANNELS - 1}], got {channel}")
    if instance.trio is None:
        raise ValueError("ternary export needs a trio instance")
    trio = instance.trio
    rows = []
    if predictions is None:
        for r in instance.test:
            rows.append((r.composition, r.absorption[channel], "interior"))
        for r in sorted(instance.train + instance.validation, key=lambda r: r.key):
            if classify_against_trio(r.composition, trio) is TrioRelation.SUBSPACE:
                rows.append((r.composition, r.absorption[channel], "perimeter"))
    else:
        predictions = np.asarray(predictions, dtype=float)
        if len(predictions) != len(instance.test):
            raise DataError(f"{len(predictions)} predictions for {len(instance.test)} test records")
        for r, p in zip(instance.test, predictions):
            rows.append((r.composition, p[channel], "interior"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value", "region", "composition"])
        for comp, v, region in rows:
            pt = ternary_project(comp, trio)
            w.writerow([repr(pt.x), repr(pt.y), repr(float(v)), region, comp.format()])
    return len(rows)


# --------------------------------------------------------------------------
# benchmark runner


@dataclass
class ModelSpec:
    """One roster entry. ``path`` (external kind) may use ``{instance}`` and ``{seed}`` fields."""

    name: str
    kind: str
    config: dict = field(default_factory=dict)
    path: str | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.kind == "external" and not self.path:
            raise ValueError(f"external model {self.name!r} needs a prediction file path")
        if self.kind == "hclmp":
            ModelConfig.from_dict(self.config)
        elif self.kind == "mlp":
            MlpBaselineConfig.from_dict(self.config)

    @property
    def uses_transfer(self) -> bool:
        return self.kind == "hclmp" and bool(self.config.get("use_transfer"))

    @property
    def uses_dos(self) -> bool:
        return self.kind == "mlp" and bool(self.config.get("warm_up"))

    def config_hash(self) -> str:
        blob = json.dumps({"kind": self.kind, "config": self.config, "path": self.path}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["name"], d["kind"], dict(d.get("config") or {}), d.get("path"))


def _lininterp_predictions(instance: DataInstance) -> tuple[np.ndarray, dict]:
    pool = instance.train + instance.validation
    out = np.zeros((len(instance.test), N_CHANNELS))
    groups: dict[ElementTrio, list[int]] = defaultdict(list)
    for i, r in enumerate(instance.test):
        if len(r.composition) != 3:
            raise DataError(f"{r.key}: interpolation needs 3-cation test compositions")
        groups[ElementTrio(sorted(r.composition.elements))].append(i)
    outside = 0
    for trio, idx in sorted(groups.items()):
        model = lininterp_fit(trio, pool)
        pred, flags = model.predict_with_flags([instance.test[i].composition for i in idx])
        out[idx] = pred
        outside += int(flags.sum())
    return out, {"out_of_hull": outside}


def predict_cell(spec: ModelSpec, instance: DataInstance, seed: int, transfer: TransferGenerator | None = None,
                 dos_records: Sequence[DosRecord] | None = None,
                 elements: Sequence[str] | None = None) -> tuple[np.ndarray, dict]:
    """Fit one roster model on an instance; test predictions in original units plus notes."""
    comps = [r.composition for r in instance.test]
    if spec.kind == "lininterp":
        return _lininterp_predictions(instance)
    if spec.kind == "external":
        path = spec.path.format(instance=instance.name, seed=seed)
        return import_external_predictions(path, instance), {}
    if spec.kind == "mlp":
        cfg = MlpBaselineConfig.from_dict({**spec.config, "seed": seed})
        model = mlp_train(instance, cfg, dos_records if cfg.warm_up else None)
        return model.predict(comps), {"selected_epoch": model.selected_epoch}
    cfg = ModelConfig.from_dict({**spec.config, "seed": seed})
    gen = transfer if cfg.use_transfer else None
    model = train(instance, gen, cfg, elements=elements)
    return model.predict(comps, gen), {"selected_epoch": model.selected_epoch}


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_")


def run_benchmark(table: SpectraTable, roster: Sequence[ModelSpec], setting: str = "loco",
                  seeds: Sequence[int] = (0,), transfer: TransferGenerator | None = None,
                  dos_records: Sequence[DosRecord] | None = None, trios: Sequence[ElementTrio] | None = None,
                  workers: int = 1, out_dir: str | Path | None = None,
                  export_channel: int | None = None) -> EvaluationReport:
    """Train and evaluate every roster model on every instance for every seed.

    ``loco`` builds one leave-one-ternary-space-out instance per eligible
    trio (or per given trio); ``random`` builds one random split over the
    given trios per seed. A cell that raises is recorded under ``failed``
    and the aggregates are then computed over the instances on which every
    model succeeded.
    """
    roster = list(roster)
    if not roster:
        raise ValueError("empty model roster")
    names = [s.name for s in roster]
    if len(set(names)) != len(names):
        raise ValueError("duplicate model names in roster")
    if any(s.uses_transfer for s in roster) and transfer is None:
        raise ValueError("roster contains a transfer-learning model but no generator was given")
    if any(s.uses_dos for s in roster) and not dos_records:
        raise ValueError("roster contains a warm-up MLP but no DOS corpus was given")
    seeds = list(seeds)
    if setting == "loco":
        trios = sorted(trios) if trios is not None else identify_data_instances(table)
        if not trios:
            raise DataError("no eligible data instances")

        def make(seed):
            return [build_instance(table, t, seed=seed) for t in trios]
    elif setting == "random":
        if trios is None:
            trios = identify_data_instances(table)
        if not trios:
            raise DataError("random setting needs trios")

        def make(seed):
            return [random_instance(table, sorted(trios), seed=seed)]
    else:
        raise ValueError(f"unknown setting {setting!r}")

    elements = table.elements
    jobs = []
    instances_by_seed = {}
    for seed in seeds:
        instances_by_seed[seed] = make(seed)
        for inst in instances_by_seed[seed]:
            for spec in roster:
                jobs.append((spec, inst, seed))

    def run(job):
        spec, inst, seed = job
        try:
            pred, notes = predict_cell(spec, inst, seed, transfer, dos_records, elements)
            truth = np.stack([r.absorption for r in inst.test])
            return pred, standardized_mae(pred, truth, inst.scaler), notes, None
        except Exception as exc:  # a failed cell must not abort the sweep
            log.warning("cell (%s, %s, seed %d) failed: %s", spec.name, inst.name, seed, exc)
            return None, None, {}, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    per_seed: dict[int, dict[tuple[str, str], np.ndarray]] = defaultdict(dict)
    failed: dict[str, dict[str, str]] = {s.name: {} for s in roster}
    notes: dict[str, dict[str, dict]] = {s.name: {} for s in roster}
    for (spec, inst, seed), (pred, mae, note, err) in zip(jobs, results):
        if err is not None:
            failed[spec.name][f"{inst.name}@seed{seed}"] = err
            continue
        per_seed[seed][(spec.name, inst.name)] = mae
        if note:
            notes[spec.name][f"{inst.name}@seed{seed}"] = note
        if out_dir is not None and export_channel is not None and inst.trio is not None and seed == seeds[0]:
            d = Path(out_dir) / "ternary"
            export_ternary(d / f"{inst.name}__truth.csv", inst, export_channel)
            export_ternary(d / f"{inst.name}__{_slug(spec.name)}.csv", inst, export_channel, pred)

    inst_names = sorted({inst.name for insts in instances_by_seed.values() for inst in insts})
    complete = [i for i in inst_names
                if all((m, i) in per_seed[s] for s in seeds for m in names)]
    cells = {}
    for i in complete:
        for m in names:
            cells[(m, i)] = np.mean([per_seed[s][(m, i)] for s in seeds], axis=0)
    report = aggregate(cells, names, complete, setting)
    report.failed = failed
    report.notes = notes
    report.seeds = seeds
    report.config_hashes = {s.name: s.config_hash() for s in roster}
    for m in names:
        vals = []
        for s in seeds:
            got = [per_seed[s][(m, i)] for i in complete]
            vals.append(float(np.mean(got)) if got else None)
        report.per_seed_scalars[m] = vals
    if out_dir is not None:
        report.write(out_dir)
    return report
