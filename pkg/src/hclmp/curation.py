"""Spectra ingest, benchmark instance identification, splits and scaling."""

from __future__ import annotations

import csv
import itertools
import json
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .composition import (
    Composition,
    CompositionError,
    ElementTrio,
    TrioRelation,
    all_trios,
    classify_against_trio,
    grid_divisions,
    parse_composition,
)

N_CHANNELS = 10
ENERGY_CENTERS = np.linspace(1.39, 3.11, N_CHANNELS)
CHANNEL_COLUMNS = [f"E{i:02d}" for i in range(1, N_CHANNELS + 1)]

MIN_INTERIOR = 26
MIN_PERIMETER = 25


class DataError(ValueError):
    """Input data does not satisfy a file schema or a precondition."""


@dataclass(frozen=True)
class SpectrumRecord:
    composition: Composition
    absorption: np.ndarray
    provenance: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.absorption, dtype=float)
        if arr.shape != (N_CHANNELS,):
            raise DataError(f"absorption must have {N_CHANNELS} channels, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "absorption", arr)

    @property
    def key(self) -> str:
        return self.composition.key


class SpectraTable:
    """One record per canonical composition."""

    def __init__(self, records: Iterable[SpectrumRecord] = ()):
        self._records: dict[str, SpectrumRecord] = {}
        for r in records:
            if r.key in self._records:
                raise DataError(f"duplicate composition {r.key}; use from_rows to average")
            self._records[r.key] = r

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[Composition, Sequence[float]]]) -> "SpectraTable":
        """Build a table, averaging channel-wise over duplicate compositions."""
        sums: dict[str, np.ndarray] = {}
        counts: dict[str, int] = defaultdict(int)
        comps: dict[str, Composition] = {}
        for comp, values in rows:
            v = np.asarray(values, dtype=float)
            if v.shape != (N_CHANNELS,):
                raise DataError(f"{comp.key}: expected {N_CHANNELS} channels, got {v.size}")
            if comp.key in sums:
                sums[comp.key] = sums[comp.key] + v
            else:
                sums[comp.key] = v.copy()
                comps[comp.key] = comp
            counts[comp.key] += 1
        return cls(SpectrumRecord(comps[k], sums[k] / counts[k]) for k in sums)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records.values())

    def __contains__(self, key) -> bool:
        if isinstance(key, Composition):
            key = key.key
        return key in self._records

    def __getitem__(self, key) -> SpectrumRecord:
        if isinstance(key, Composition):
            key = key.key
        return self._records[key]

    def get(self, key, default=None):
        try:
            return self[key]
        except KeyError:
            return default

    @property
    def records(self) -> list[SpectrumRecord]:
        return list(self._records.values())

    @property
    def elements(self) -> list[str]:
        els = set()
        for r in self._records.values():
            els.update(r.composition.elements)
        return sorted(els)


def ingest_spectra(path: str | Path) -> SpectraTable:
    """Read a ``composition,E01..E10`` CSV, averaging duplicate compositions."""
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return SpectraTable()
        header = [h.strip() for h in header]
        if header[:1] != ["composition"]:
            raise DataError(f"{path}: first column must be 'composition'")
        if header[1:] != CHANNEL_COLUMNS:
            raise DataError(f"{path}: expected columns {CHANNEL_COLUMNS}, got {header[1:]}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != N_CHANNELS + 1:
                raise DataError(f"{path}:{lineno}: expected {N_CHANNELS} channels, got {len(row) - 1}")
            try:
                comp = parse_composition(row[0])
                values = [float(x) for x in row[1:]]
            except (CompositionError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            rows.append((comp, values))
    return SpectraTable.from_rows(rows)


def write_spectra(path: str | Path, items: Iterable[tuple[Composition, Sequence[float]]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["composition", *CHANNEL_COLUMNS])
        for comp, values in items:
            w.writerow([comp.format(), *(repr(float(v)) for v in values)])


# --------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def fit_standardizer(records_or_values, allow_degenerate: bool = False) -> Standardizer:
    """Per-channel mean and (population) standard deviation.

    Raises DataError naming the channel when a channel has zero variance,
    unless ``allow_degenerate`` is set, in which case its std is taken as 1.
    """
    values = _as_matrix(records_or_values)
    if values.shape[0] < 2:
        raise DataError("need at least 2 records to fit a standardizer")
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    bad = np.flatnonzero(~(std > 1e-12))
    if bad.size:
        if not allow_degenerate:
            raise DataError(f"degenerate channel {int(bad[0])} (zero variance)")
        std = std.copy()
        std[bad] = 1.0
    return Standardizer(mean, std)


def standardize(s: Standardizer, v) -> np.ndarray:
    return (np.asarray(v, dtype=float) - s.mean) / s.std


def destandardize(s: Standardizer, v) -> np.ndarray:
    return np.asarray(v, dtype=float) * s.std + s.mean


def _as_matrix(records_or_values) -> np.ndarray:
    if isinstance(records_or_values, np.ndarray):
        return np.atleast_2d(records_or_values.astype(float))
    items = list(records_or_values)
    if items and isinstance(items[0], SpectrumRecord):
        return np.stack([r.absorption for r in items]) if items else np.zeros((0, N_CHANNELS))
    return np.atleast_2d(np.asarray(items, dtype=float))


# --------------------------------------------------------------------------
# data instances


@dataclass
class DataInstance:
    trio: ElementTrio | None
    test: list[SpectrumRecord]
    train: list[SpectrumRecord]
    validation: list[SpectrumRecord]
    scaler: Standardizer
    seed: int = 0
    name: str = field(default="")

    def __post_init__(self):
        if not self.name:
            self.name = self.trio.name if self.trio is not None else "random"

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "trio": list(self.trio.elements) if self.trio is not None else None,
            "seed": self.seed,
            "splits": {
                "train": sorted(r.key for r in self.train),
                "validation": sorted(r.key for r in self.validation),
                "test": sorted(r.key for r in self.test),
            },
            "scaler": self.scaler.to_dict(),
        }

    def write_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_manifest(cls, table: SpectraTable, manifest: dict) -> "DataInstance":
        try:
            splits = {k: [table[key] for key in v] for k, v in manifest["splits"].items()}
        except KeyError as exc:
            raise DataError(f"manifest references composition missing from table: {exc}") from None
        trio = ElementTrio(manifest["trio"]) if manifest.get("trio") else None
        return cls(trio, splits["test"], splits["train"], splits["validation"],
                   Standardizer.from_dict(manifest["scaler"]), manifest["seed"], manifest.get("name", ""))


def _grid_index(table: SpectraTable, n: int) -> dict[frozenset, dict[tuple, SpectrumRecord]]:
    """Group on-grid records with <=3 elements by element set."""
    index: dict[frozenset, dict[tuple, SpectrumRecord]] = defaultdict(dict)
    for rec in table:
        comp = rec.composition
        if len(comp) > 3:
            continue
        counts = comp.grid_counts(n)
        if counts is None:
            continue
        index[comp.elements][tuple(sorted(counts.items()))] = rec
    return index


def _trio_grid_records(index, trio: ElementTrio) -> tuple[list[SpectrumRecord], list[SpectrumRecord]]:
    interior = list(index.get(frozenset(trio.elements), {}).values())
    perimeter = []
    for size in (1, 2):
        for sub in itertools.combinations(trio.elements, size):
            perimeter.extend(index.get(frozenset(sub), {}).values())
    return interior, perimeter


def trio_grid_records(table: SpectraTable, trio: ElementTrio, step: float = 0.1):
    """(interior, perimeter) on-grid records of the trio present in the table."""
    return _trio_grid_records(_grid_index(table, grid_divisions(step)), trio)


def identify_data_instances(table: SpectraTable, step: float = 0.1,
                            min_interior: int = MIN_INTERIOR,
                            min_perimeter: int = MIN_PERIMETER) -> list[ElementTrio]:
    index = _grid_index(table, grid_divisions(step))
    out = []
    for els, pts in index.items():
        if len(els) != 3 or len(pts) < min_interior:
            continue
        trio = ElementTrio(els)
        _, perimeter = _trio_grid_records(index, trio)
        if len(perimeter) >= min_perimeter:
            out.append(trio)
    return sorted(out)


def _pair_count(comp: Composition, trio: ElementTrio) -> int:
    return len(comp.elements.intersection(trio.elements))


def build_instance(table: SpectraTable, trio: ElementTrio, val_fraction: float = 0.10,
                   seed: int = 0, step: float = 0.1) -> DataInstance:
    """Leave-one-ternary-space-out split for ``trio``.

    The test set is the trio's interior grid points. Every record that does
    not contain all three trio elements is available for training; the
    validation set takes ``val_fraction`` of that pool, preferring records
    that contain exactly a pair of the trio's elements.
    """
    n = grid_divisions(step)
    index = _grid_index(table, n)
    interior, perimeter = _trio_grid_records(index, trio)
    if len(interior) < MIN_INTERIOR or len(perimeter) < MIN_PERIMETER:
        raise DataError(f"trio {trio.name} is not an eligible data instance "
                        f"({len(interior)} interior, {len(perimeter)} perimeter)")
    test = sorted(interior, key=lambda r: r.key)
    pool = sorted((r for r in table
                   if classify_against_trio(r.composition, trio) is not TrioRelation.CONTAINS_ALL_THREE),
                  key=lambda r: r.key)
    validation, train = _priority_validation(pool, trio, val_fraction, seed)
    return DataInstance(trio, test, train, validation, fit_standardizer(train), seed)


def _priority_validation(pool, trio, val_fraction, seed):
    rng = np.random.default_rng(seed)
    n_val = int(round(val_fraction * len(pool)))
    paired = [i for i, r in enumerate(pool) if _pair_count(r.composition, trio) == 2]
    others = [i for i, r in enumerate(pool) if _pair_count(r.composition, trio) != 2]
    paired = [paired[i] for i in rng.permutation(len(paired))]
    chosen = paired[:n_val]
    if len(chosen) < n_val:
        rest = [others[i] for i in rng.permutation(len(others))]
        chosen += rest[: n_val - len(chosen)]
    chosen_set = set(chosen)
    validation = [pool[i] for i in sorted(chosen_set)]
    train = [r for i, r in enumerate(pool) if i not in chosen_set]
    return validation, train


class RandomSplit(NamedTuple):
    train: list[SpectrumRecord]
    validation: list[SpectrumRecord]
    test: list[SpectrumRecord]


def build_random_setting(table: SpectraTable, trios: Sequence[ElementTrio], test_fraction: float = 0.30,
                         seed: int = 0, val_fraction: float = 0.10, step: float = 0.1) -> RandomSplit:
    if not trios:
        raise DataError("random setting needs at least one trio")
    index = _grid_index(table, grid_divisions(step))
    union: dict[str, SpectrumRecord] = {}
    for trio in trios:
        for rec in _trio_grid_records(index, trio)[0]:
            union[rec.key] = rec
    u = [union[k] for k in sorted(union)]
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * len(u)))
    test_idx = set(rng.permutation(len(u))[:n_test].tolist())
    test = [u[i] for i in sorted(test_idx)]
    test_keys = {r.key for r in test}
    pool = sorted((r for r in table if r.key not in test_keys), key=lambda r: r.key)
    n_val = int(round(val_fraction * len(pool)))
    val_idx = set(rng.permutation(len(pool))[:n_val].tolist())
    validation = [pool[i] for i in sorted(val_idx)]
    train = [r for i, r in enumerate(pool) if i not in val_idx]
    return RandomSplit(train, validation, test)


def random_instance(table, trios, seed: int = 0, **kw) -> DataInstance:
    split = build_random_setting(table, trios, seed=seed, **kw)
    return DataInstance(None, split.test, split.train, split.validation,
                        fit_standardizer(split.train), seed, "random")


def enumerate_prediction_spaces(elements: Iterable[str], known_trios: Iterable[ElementTrio] = ()) -> list[ElementTrio]:
    known = set(known_trios)
    return [t for t in all_trios(elements) if t not in known]


def deployment_instance(table: SpectraTable, val_fraction: float = 0.10, seed: int = 0) -> DataInstance:
    """Train/validation split over the whole table for deployment models (no test set)."""
    pool = sorted(table, key=lambda r: r.key)
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(val_fraction * len(pool))))
    val_idx = set(rng.permutation(len(pool))[:n_val].tolist())
    validation = [pool[i] for i in sorted(val_idx)]
    train = [r for i, r in enumerate(pool) if i not in val_idx]
    return DataInstance(None, [], train, validation, fit_standardizer(train), seed, "deployment")
