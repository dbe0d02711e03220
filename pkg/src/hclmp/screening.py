"""Deployment screens over predicted or measured spectra and the colored embedding export."""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .composition import Composition, ElementTrio
from .curation import ENERGY_CENTERS, N_CHANNELS, SpectraTable

log = logging.getLogger(__name__)

# absolute slack on threshold comparisons, so that means like 0.2 computed as
# (0.2 + 0.2 + 0.2) / 3 = 0.20000000000000004 still count as on the boundary
SCREEN_TOL = 1e-12

RGB_WINDOWS = ((0, 1, 2), (3, 4, 5), (6, 7, 8, 9))


@dataclass(frozen=True)
class ScreenCriteria:
    high_window: tuple[int, ...] = (5, 6, 7)
    low_window: tuple[int, ...] = (0, 1, 2, 3)
    ratio: float = 5.0
    floor: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "high_window", tuple(int(i) for i in self.high_window))
        object.__setattr__(self, "low_window", tuple(int(i) for i in self.low_window))
        if not self.high_window or not self.low_window:
            raise ValueError("screen windows must be non-empty")
        if set(self.high_window) & set(self.low_window):
            raise ValueError("high and low windows overlap")
        if any(not 0 <= i < N_CHANNELS for i in self.high_window + self.low_window):
            raise ValueError(f"window indices must lie in [0, {N_CHANNELS - 1}]")
        if not self.ratio > 0:
            raise ValueError("ratio must be positive")

    def to_dict(self) -> dict:
        return {
            "high_window": list(self.high_window),
            "low_window": list(self.low_window),
            "high_window_ev": [float(ENERGY_CENTERS[i]) for i in self.high_window],
            "low_window_ev": [float(ENERGY_CENTERS[i]) for i in self.low_window],
            "ratio": self.ratio,
            "floor": self.floor,
        }

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "ScreenCriteria":
        d = dict(d or {})
        d.pop("high_window_ev", None)
        d.pop("low_window_ev", None)
        return cls(**d)


def ratio_clause(spectrum, criteria: ScreenCriteria = ScreenCriteria()) -> bool:
    s = np.asarray(spectrum, dtype=float)
    high = float(np.mean(s[list(criteria.high_window)]))
    low = float(np.mean(s[list(criteria.low_window)]))
    if low <= 0:
        # a non-positive low window is a measurement artifact; never flip the ratio's sign
        return True
    return high >= criteria.ratio * low - SCREEN_TOL


def bandgap_screen(spectrum, criteria: ScreenCriteria = ScreenCriteria()) -> bool:
    s = np.asarray(spectrum, dtype=float)
    if s.shape != (N_CHANNELS,):
        raise ValueError(f"expected {N_CHANNELS} channels, got {s.shape}")
    high = float(np.mean(s[list(criteria.high_window)]))
    return high > criteria.floor + SCREEN_TOL and ratio_clause(s, criteria)


def transparency_screen(spectrum, composition: Composition, element: str,
                        min_fraction: float = 0.5, threshold: float = 0.22) -> bool:
    s = np.asarray(spectrum, dtype=float)
    if s.shape != (N_CHANNELS,):
        raise ValueError(f"expected {N_CHANNELS} channels, got {s.shape}")
    return composition.get(element) >= min_fraction - SCREEN_TOL and bool(np.all(s < threshold))


@dataclass
class SpaceScreenResult:
    trio: ElementTrio
    passing: list[Composition]
    subspace_novel: bool
    passing_subspace: list[Composition] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "trio": self.trio.name,
            "passing": [c.format() for c in self.passing],
            "subspace_novel": self.subspace_novel,
            "passing_subspace": [c.format() for c in self.passing_subspace],
        }


@dataclass
class ScreeningReport:
    criteria: ScreenCriteria
    results: list[SpaceScreenResult]
    n_screened: int

    @property
    def summary(self) -> dict:
        return {
            "screened_compositions": self.n_screened,
            "passing_compositions": sum(len(r.passing) for r in self.results),
            "passing_spaces": len(self.results),
            "subspace_novel_spaces": sum(r.subspace_novel for r in self.results),
        }

    def to_dict(self) -> dict:
        return {"criteria": self.criteria.to_dict(), "summary": self.summary,
                "results": [r.to_dict() for r in self.results]}

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "screen_report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with (out / "passing.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trio", "composition", "subspace_novel"])
            for r in self.results:
                for c in r.passing:
                    w.writerow([r.trio.name, c.format(), int(r.subspace_novel)])


def _pairs(items) -> list[tuple[Composition, np.ndarray]]:
    if isinstance(items, SpectraTable):
        return [(r.composition, r.absorption) for r in items]
    return [(c, np.asarray(v, dtype=float)) for c, v in items]


def screen_spaces(items: SpectraTable | Iterable[tuple[Composition, Sequence[float]]],
                  reference: SpectraTable, trios: Sequence[ElementTrio] | None = None,
                  criteria: ScreenCriteria = ScreenCriteria()) -> ScreeningReport:
    """Band-gap-proxy screen of 3-cation compositions grouped by trio.

    Only trios with at least one passing composition are reported. A trio is
    subspace-novel when no 2-cation record of ``reference`` inside the trio
    passes the same screen.
    """
    pairs = [(c, v) for c, v in _pairs(items) if len(c) == 3]
    wanted = set(trios) if trios is not None else None
    by_trio: dict[ElementTrio, list[Composition]] = {}
    n = 0
    for c, v in pairs:
        trio = ElementTrio(sorted(c.elements))
        if wanted is not None and trio not in wanted:
            continue
        n += 1
        if bandgap_screen(v, criteria):
            by_trio.setdefault(trio, []).append(c)
    binaries = [(r.composition, r.absorption) for r in reference if len(r.composition) == 2]
    results = []
    for trio in sorted(by_trio):
        inside = [c for c, v in binaries if c.elements <= set(trio.elements) and bandgap_screen(v, criteria)]
        results.append(SpaceScreenResult(trio, sorted(by_trio[trio], key=lambda c: c.key), not inside,
                                         sorted(inside, key=lambda c: c.key)))
    return ScreeningReport(criteria, results, n)


def quantile_rgb(spectra) -> np.ndarray:
    """Window means mapped to uniform ranks in [0, 1] over the whole set (ties share a rank)."""
    s = np.asarray(spectra, dtype=float)
    if s.ndim != 2 or s.shape[1] != N_CHANNELS:
        raise ValueError(f"expected (n, {N_CHANNELS}) spectra, got {s.shape}")
    n = s.shape[0]
    if n < 2:
        raise ValueError("quantile colors need at least 2 records")
    out = np.empty((n, 3))
    for k, window in enumerate(RGB_WINDOWS):
        m = s[:, list(window)].mean(axis=1)
        out[:, k] = (rankdata(m, method="average") - 1.0) / (n - 1.0)
    return out


# --------------------------------------------------------------------------
# 2-D embedding


Reducer = Callable[..., np.ndarray]
REDUCERS: dict[str, Reducer] = {}
DEFAULT_REDUCER_CONFIG = {"perplexity": 15.0, "max_iter": 5000}


def register_reducer(name: str, fn: Reducer) -> None:
    REDUCERS[name] = fn


def _tsne(x: np.ndarray, perplexity: float = 15.0, max_iter: int = 5000, seed: int = 0) -> np.ndarray:
    from sklearn.manifold import TSNE

    return TSNE(n_components=2, perplexity=perplexity, max_iter=max_iter, random_state=seed,
                init="pca").fit_transform(x)


register_reducer("tsne", _tsne)


def export_embedding(sets: Mapping[str, SpectraTable | Iterable[tuple[Composition, Sequence[float]]]],
                     path: str | Path, reducer: str | None = "tsne",
                     reducer_config: Mapping | None = None) -> bool:
    """Write ``set,x,y,r,g,b,composition`` for the union of ``sets``.

    Colors and coordinates are both computed on the union. Returns whether
    coordinates were written; without a usable reducer x and y are left
    empty.
    """
    tags, comps, rows = [], [], []
    for tag, items in sets.items():
        for c, v in _pairs(items):
            tags.append(tag)
            comps.append(c)
            rows.append(v)
    x = np.stack(rows) if rows else np.zeros((0, N_CHANNELS))
    rgb = quantile_rgb(x)
    coords = None
    fn = REDUCERS.get(reducer) if reducer else None
    if fn is None:
        log.warning("no reducer %r registered; exporting colors only", reducer)
    else:
        try:
            coords = np.asarray(fn(x, **{**DEFAULT_REDUCER_CONFIG, **dict(reducer_config or {})}), dtype=float)
        except ImportError as exc:
            log.warning("reducer %r unavailable (%s); exporting colors only", reducer, exc)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["set", "x", "y", "r", "g", "b", "composition"])
        for i, (tag, c) in enumerate(zip(tags, comps)):
            xy = ("", "") if coords is None else (repr(float(coords[i, 0])), repr(float(coords[i, 1])))
            w.writerow([tag, *xy, *(repr(float(v)) for v in rgb[i]), c.format()])
    return coords is not None
