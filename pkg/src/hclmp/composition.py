"""Cation compositions, ternary grids and the 2-D ternary projection."""

from __future__ import annotations

import itertools
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from enum import Enum

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
_ELEMENT_SET = frozenset(ELEMENTS)

# tolerance for deciding that a measured fraction sits on a grid node
GRID_TOL = 1e-6


class CompositionError(ValueError):
    pass


def canonical_symbol(symbol: str) -> str:
    s = symbol.strip()
    s = s[:1].upper() + s[1:].lower()
    if s not in _ELEMENT_SET:
        raise CompositionError(f"unknown element symbol {symbol!r}")
    return s


class Composition(Mapping):
    """Normalized cation composition (element symbol -> fraction).

    Zero entries are dropped and the remaining fractions rescaled to sum
    to one. Instances are immutable and hash by their canonical key.
    """

    __slots__ = ("_items", "_key")

    def __init__(self, fractions: Mapping[str, float] | Iterable[tuple[str, float]]):
        pairs = fractions.items() if isinstance(fractions, Mapping) else fractions
        acc: dict[str, float] = {}
        for el, frac in pairs:
            el = canonical_symbol(el)
            frac = float(frac)
            if not math.isfinite(frac):
                raise CompositionError(f"non-finite fraction for {el}")
            if frac < 0:
                raise CompositionError(f"negative fraction for {el}: {frac}")
            acc[el] = acc.get(el, 0.0) + frac
        acc = {el: f for el, f in acc.items() if f > 0}
        if not acc:
            raise CompositionError("empty composition")
        total = math.fsum(acc.values())
        self._items = tuple(sorted((el, f / total) for el, f in acc.items()))
        self._key = ",".join(f"{el}:{_fmt6(f)}" for el, f in self._items)

    @classmethod
    def _trusted(cls, items: tuple[tuple[str, float], ...], key: str) -> "Composition":
        # items already canonical: sorted symbols, positive fractions summing to one
        c = cls.__new__(cls)
        c._items = items
        c._key = key
        return c

    def __getitem__(self, el: str) -> float:
        for e, f in self._items:
            if e == el:
                return f
        raise KeyError(el)

    def get(self, el, default=0.0):
        try:
            return self[el]
        except KeyError:
            return default

    def __iter__(self) -> Iterator[str]:
        return (e for e, _ in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __hash__(self) -> int:
        return hash(self._key)

    def __eq__(self, other) -> bool:
        if isinstance(other, Composition):
            return self._key == other._key
        return NotImplemented

    def __repr__(self) -> str:
        return f"Composition({self.format()!r})"

    @property
    def key(self) -> str:
        """Canonical identity: sorted symbols, fractions rounded to 6 decimals."""
        return self._key

    @property
    def elements(self) -> frozenset[str]:
        return frozenset(e for e, _ in self._items)

    def format(self) -> str:
        # repr keeps full float precision so parse(format(c)) == c exactly
        return ",".join(f"{el}:{f!r}" for el, f in self._items)

    def vector(self, universe: list[str] | tuple[str, ...]) -> list[float]:
        """Fractions laid out in the fixed order of ``universe``."""
        missing = self.elements.difference(universe)
        if missing:
            raise CompositionError(f"elements outside universe: {sorted(missing)}")
        return [self.get(el) for el in universe]

    def grid_counts(self, n: int) -> dict[str, int] | None:
        """Integer grid multiples (fraction * n) or None when off-grid."""
        out = {}
        for el, f in self._items:
            m = round(f * n)
            if abs(f * n - m) > GRID_TOL * n:
                return None
            out[el] = m
        return out


def _fmt6(x: float) -> str:
    s = f"{x:.6f}".rstrip("0").rstrip(".")
    return s or "0"


def parse_composition(text: str) -> Composition:
    """Parse ``"Fe:0.5,Bi:0.5"`` style text into a normalized composition."""
    text = text.strip()
    if not text:
        raise CompositionError("empty composition")
    pairs = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        el, sep, frac = chunk.partition(":")
        if not sep:
            raise CompositionError(f"malformed composition term {chunk!r}")
        try:
            value = float(frac)
        except ValueError:
            raise CompositionError(f"malformed fraction in {chunk!r}") from None
        pairs.append((el, value))
    return Composition(pairs)


def format_composition(c: Composition) -> str:
    return c.format()


@dataclass(frozen=True, order=True)
class ElementTrio:
    elements: tuple[str, str, str]

    def __init__(self, *symbols):
        if len(symbols) == 1 and not isinstance(symbols[0], str):
            symbols = tuple(symbols[0])
        els = tuple(sorted({canonical_symbol(s) for s in symbols}))
        if len(els) != 3 or len(symbols) != 3:
            raise CompositionError(f"a trio needs 3 distinct elements, got {symbols}")
        object.__setattr__(self, "elements", els)

    @classmethod
    def parse(cls, name: str) -> "ElementTrio":
        return cls(name.replace(",", "-").split("-"))

    @property
    def name(self) -> str:
        return "-".join(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class TernaryPoint:
    x: float
    y: float


class Region(str, Enum):
    INTERIOR = "interior"
    PERIMETER = "perimeter"


class TrioRelation(str, Enum):
    CONTAINS_ALL_THREE = "contains_all_three"
    SUBSPACE = "subspace"
    SHARES_PAIR = "shares_pair"
    DISJOINT_OR_PARTIAL = "disjoint_or_partial"


def grid_divisions(step: float) -> int:
    n = round(1.0 / step)
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise CompositionError(f"step {step} does not divide 1")
    return n


def enumerate_simplex_grid(trio: ElementTrio, step: float = 0.1) -> list[tuple[Composition, Region]]:
    """All compositions of the trio on the ``step`` grid, tagged by region."""
    n = grid_divisions(step)
    els = trio.elements
    text = [_fmt6(m / n) for m in range(n + 1)]
    out = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            counts = (i, j, n - i - j)
            parts = [(el, m) for el, m in zip(els, counts) if m]
            comp = Composition._trusted(tuple((el, m / n) for el, m in parts),
                                        ",".join(f"{el}:{text[m]}" for el, m in parts))
            region = Region.INTERIOR if all(counts) else Region.PERIMETER
            out.append((comp, region))
    return out


def ternary_project(c: Composition, trio: ElementTrio) -> TernaryPoint:
    """Map a composition within ``trio`` to the unit equilateral triangle.

    With (a, b, c) the fractions in the trio's sorted order, the vertices
    land at a -> (0, 0), b -> (0.5, sqrt(3)/2), c -> (1, 0).
    """
    extra = c.elements.difference(trio.elements)
    if extra:
        raise CompositionError(f"{sorted(extra)} not in trio {trio.name}")
    a = c.get(trio.elements[0])
    b = c.get(trio.elements[1])
    return TernaryPoint(1.0 - a - b / 2.0, b * math.sqrt(3.0) / 2.0)


def classify_against_trio(c: Composition, trio: ElementTrio) -> TrioRelation:
    els = c.elements
    shared = len(els.intersection(trio.elements))
    if shared == 3:
        return TrioRelation.CONTAINS_ALL_THREE
    if els <= set(trio.elements):
        return TrioRelation.SUBSPACE
    if shared == 2:
        return TrioRelation.SHARES_PAIR
    return TrioRelation.DISJOINT_OR_PARTIAL


def all_trios(elements: Iterable[str]) -> Iterator[ElementTrio]:
    for combo in itertools.combinations(sorted(set(elements)), 3):
        yield ElementTrio(combo)
