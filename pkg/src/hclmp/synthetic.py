"""Synthetic composition/spectrum/DOS corpora for desk-scale checks.

A :class:`SyntheticWorld` assigns every element a smooth unary spectrum, a
set of pairwise interaction profiles and one hidden scalar property. The
hidden property only shapes the absorption of 3-cation compositions, and it
is written linearly into every element's density of states, so it can be
recovered from the DOS corpus but not from 1- and 2-cation spectra.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .composition import Composition, ElementTrio, enumerate_simplex_grid
from .curation import N_CHANNELS, SpectraTable, SpectrumRecord
from .transfer import DOS_ENERGIES, DosRecord

DEFAULT_ELEMENTS = ("Ag", "Bi", "Ca", "Ce", "Co", "Cu", "Fe", "Mn", "Ni", "Sm", "Zn", "Pd")


@dataclass
class SyntheticWorld:
    elements: list[str]
    unary: np.ndarray  # (E, 10)
    pair: np.ndarray  # (E, E, 10), symmetric
    hidden: np.ndarray  # (E,) in [-1, 1]
    dos_profiles: np.ndarray  # (E, 161)
    ternary_amplitude: float = 1.5
    dos_noise: float = 0.02
    ternary_offset: float = 1.0

    def _idx(self, el: str) -> int:
        return self.elements.index(el)

    def spectrum(self, comp: Composition) -> np.ndarray:
        els = sorted(comp.elements)
        f = np.array([comp[e] for e in els])
        idx = [self._idx(e) for e in els]
        y = f @ self.unary[idx]
        for (i, a), (j, b) in itertools.combinations(enumerate(idx), 2):
            y = y + 4.0 * f[i] * f[j] * self.pair[a, b]
        if len(els) >= 3:
            hbar = float(f @ self.hidden[idx])
            prod = 0.0
            for i, j, k in itertools.combinations(range(len(els)), 3):
                prod += f[i] * f[j] * f[k]
            y = y + 27.0 * prod * self.ternary_amplitude * (self.ternary_offset + hbar) * _ternary_profile()
        return y

    def dos(self, comp: Composition, rng: np.random.Generator | None = None) -> np.ndarray:
        f = np.array([comp[e] for e in sorted(comp.elements)])
        idx = [self._idx(e) for e in sorted(comp.elements)]
        d = f @ self.dos_profiles[idx]
        if rng is not None and self.dos_noise > 0:
            d = d + rng.normal(0.0, self.dos_noise, size=d.shape)
        return np.clip(d, 0.0, None)


def _ternary_profile() -> np.ndarray:
    return np.linspace(0.5, 1.5, N_CHANNELS)


def _gauss(x, mu, width):
    return np.exp(-0.5 * ((x - mu) / width) ** 2)


def make_world(elements=DEFAULT_ELEMENTS, seed: int = 0, hidden: dict[str, float] | None = None,
               ternary_amplitude: float = 1.5, pair_scale: float = 0.3, dos_noise: float = 0.02,
               ternary_offset: float = 1.0) -> SyntheticWorld:
    rng = np.random.default_rng(seed)
    elements = sorted(elements)
    n = len(elements)
    ch = np.linspace(0.0, 1.0, N_CHANNELS)
    # smooth unary spectra: a sigmoid edge at a random position plus an offset
    edge = rng.uniform(0.2, 0.8, n)
    height = rng.uniform(0.3, 1.2, n)
    unary = 0.05 + height[:, None] / (1.0 + np.exp(-(ch[None, :] - edge[:, None]) / 0.12))
    pair = np.zeros((n, n, N_CHANNELS))
    for a, b in itertools.combinations(range(n), 2):
        amp = rng.normal(0.0, pair_scale)
        slope = rng.uniform(-0.5, 0.5)
        prof = amp * (1.0 + slope * (ch - 0.5))
        pair[a, b] = pair[b, a] = prof
    h = rng.uniform(-1.0, 1.0, n)
    if hidden:
        for el, v in hidden.items():
            h[elements.index(el)] = v
    # every element's DOS: a baseline, three random peaks plus a peak whose height encodes the hidden property
    # random peaks stay clear of the 2 eV window that carries the hidden property
    centers = np.where(rng.random((n, 3)) < 0.6, rng.uniform(-7.5, -1.5, (n, 3)), rng.uniform(5.0, 7.5, (n, 3)))
    heights = rng.uniform(0.5, 1.5, (n, 3))
    baseline = rng.uniform(0.1, 0.6, n)
    dos = baseline[:, None] + sum(heights[:, k, None] * _gauss(DOS_ENERGIES[None, :], centers[:, k, None], 1.5)
                                  for k in range(3))
    dos = dos + (1.0 + h)[:, None] * 1.5 * _gauss(DOS_ENERGIES[None, :], 2.0, 0.8)
    return SyntheticWorld(elements, unary, pair, h, dos, ternary_amplitude, dos_noise, ternary_offset)


def grid_compositions(world_or_elements, trios, step: float = 0.1, binaries: bool = True):
    """Unary + binary grid points over all elements, plus the interiors of ``trios``."""
    els = world_or_elements.elements if isinstance(world_or_elements, SyntheticWorld) else list(world_or_elements)
    comps: dict[str, Composition] = {}
    n = round(1 / step)
    for e in els:
        comps[Composition({e: 1.0}).key] = Composition({e: 1.0})
    if binaries:
        for a, b in itertools.combinations(sorted(els), 2):
            for i in range(1, n):
                c = Composition({a: i / n, b: (n - i) / n})
                comps[c.key] = c
    for trio in trios:
        for c, _ in enumerate_simplex_grid(trio, step):
            comps[c.key] = c
    return [comps[k] for k in sorted(comps)]


def make_spectra_table(world: SyntheticWorld, trios, step: float = 0.1, noise: float = 0.0,
                       seed: int = 0, drop_interior: dict[ElementTrio, int] | None = None) -> SpectraTable:
    rng = np.random.default_rng(seed)
    comps = grid_compositions(world, trios, step)
    if drop_interior:
        drop = set()
        for trio, k in drop_interior.items():
            interior = [c for c, r in enumerate_simplex_grid(trio, step) if r.value == "interior"]
            for i in rng.permutation(len(interior))[:k]:
                drop.add(interior[i].key)
        comps = [c for c in comps if c.key not in drop]
    recs = []
    for c in comps:
        y = world.spectrum(c)
        if noise:
            y = y + rng.normal(0.0, noise, size=y.shape)
        recs.append(SpectrumRecord(c, y))
    return SpectraTable(recs)


def random_composition(elements, rng, max_elements: int = 3) -> Composition:
    k = int(rng.integers(1, max_elements + 1))
    chosen = rng.choice(len(elements), size=k, replace=False)
    fr = rng.dirichlet(np.ones(k))
    return Composition({elements[i]: f for i, f in zip(chosen, fr)})


def make_dos_records(world: SyntheticWorld, n: int = 1500, seed: int = 0, max_elements: int = 3) -> list[DosRecord]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        c = random_composition(world.elements, rng, max_elements)
        out.append(DosRecord(c, world.dos(c, rng)))
    return out


def affine_table(trio: ElementTrio, vertex_values: np.ndarray, step: float = 0.1) -> SpectraTable:
    """Full grid of one trio with channel-wise affine absorption."""
    vertex_values = np.asarray(vertex_values, dtype=float)
    recs = []
    for c, _ in enumerate_simplex_grid(trio, step):
        f = np.array([c.get(e) for e in trio.elements])
        recs.append(SpectrumRecord(c, f @ vertex_values))
    return SpectraTable(recs)


def benchmark_world(seed: int = 0, n_train_trios: int = 40):
    """World and trio layout for the transfer-benefit comparison.

    Pd and Zn carry extreme, opposite hidden values and appear in no training
    ternary, so 1- and 2-cation spectra say nothing about them. The 3-cation
    term is proportional to the mean hidden value (no offset). Each
    evaluation trio pairs Pd or Zn with the two most neutral remaining
    elements; its 3-cation term then sits inside the range seen in training,
    and the DOS corpus is the only route to its sign and size.
    """
    world = make_world(DEFAULT_ELEMENTS, seed=seed, hidden={"Pd": 0.95, "Zn": -0.95}, ternary_offset=0.0)
    connected = [e for e in world.elements if e not in ("Pd", "Zn")]
    rng = np.random.default_rng(seed + 1)
    combos = list(itertools.combinations(connected, 3))
    picks = rng.permutation(len(combos))[:n_train_trios]
    train_trios = [ElementTrio(combos[i]) for i in sorted(picks)]
    neutral = sorted(connected, key=lambda e: abs(world.hidden[world._idx(e)]))
    eval_trios = [ElementTrio("Pd", *neutral[:2]), ElementTrio("Zn", *neutral[2:4])]
    return world, train_trios, eval_trios
