"""Reference predictors: perimeter interpolation and an ElemNet-style MLP."""

from __future__ import annotations

import copy
import csv
import hashlib
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import Delaunay, QhullError
from torch import nn

from .composition import Composition, CompositionError, ElementTrio, parse_composition, ternary_project
from .curation import (CHANNEL_COLUMNS, N_CHANNELS, DataError, DataInstance, SpectrumRecord,
                       destandardize, standardize)
from .transfer import DosRecord, TrainingDivergence

# --------------------------------------------------------------------------
# linear interpolation over the ternary perimeter


class LinInterpModel:
    """Piecewise-linear interpolation of the perimeter spectra of one trio.

    Points are projected with :func:`ternary_project`, sorted
    lexicographically (so cocircular ties triangulate the same way every
    time) and triangulated; each channel is blended with the barycentric
    weights of the enclosing triangle.
    """

    def __init__(self, trio: ElementTrio, points: np.ndarray, values: np.ndarray):
        self.trio = trio
        self.points = points
        self.values = values
        try:
            self.triangulation = Delaunay(points)
        except QhullError as exc:
            raise ValueError(f"{trio.name}: perimeter points are collinear or degenerate") from exc

    def barycentric(self, xy: np.ndarray, simplex: int) -> np.ndarray:
        t = self.triangulation.transform[simplex]
        b = t[:2] @ (np.asarray(xy, dtype=float) - t[2])
        return np.append(b, 1.0 - b.sum())

    def evaluate_in_simplex(self, xy, simplex: int) -> np.ndarray:
        w = self.barycentric(xy, simplex)
        return w @ self.values[self.triangulation.simplices[simplex]]

    def predict_points(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values at projected points and a mask of out-of-hull points (nearest-point filled)."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        simplices = self.triangulation.find_simplex(xy, tol=1e-12)
        out = np.empty((len(xy), self.values.shape[1]))
        outside = simplices < 0
        for i, (p, s) in enumerate(zip(xy, simplices)):
            if s >= 0:
                out[i] = self.evaluate_in_simplex(p, s)
            else:
                j = int(np.argmin(((self.points - p) ** 2).sum(1)))
                out[i] = self.values[j]
        return out, outside

    def predict(self, comps: Sequence[Composition]) -> np.ndarray:
        return self.predict_with_flags(comps)[0]

    def predict_with_flags(self, comps: Sequence[Composition]) -> tuple[np.ndarray, np.ndarray]:
        comps = list(comps)
        if not comps:
            return np.zeros((0, self.values.shape[1])), np.zeros(0, dtype=bool)
        xy = np.array([[p.x, p.y] for p in (ternary_project(c, self.trio) for c in comps)])
        return self.predict_points(xy)


def lininterp_fit(trio: ElementTrio, records: Sequence[SpectrumRecord]) -> LinInterpModel:
    """Fit on the trio's perimeter records; records containing all three elements are ignored."""
    pts = []
    for r in records:
        if r.composition.elements <= set(trio.elements) and len(r.composition) < 3:
            p = ternary_project(r.composition, trio)
            pts.append(((p.x, p.y), r.absorption))
    if len(pts) < 3:
        raise ValueError(f"{trio.name}: need at least 3 perimeter points, got {len(pts)}")
    pts.sort(key=lambda t: t[0])
    points = np.array([p for p, _ in pts])
    values = np.array([v for _, v in pts])
    return LinInterpModel(trio, points, values)


def lininterp_predict(model: LinInterpModel, comps: Sequence[Composition]) -> np.ndarray:
    return model.predict(comps)


# --------------------------------------------------------------------------
# ElemNetMP-style multilayer perceptron


@dataclass
class MlpBaselineConfig:
    # width/depth are not published for the multi-property variant; these defaults are a choice
    hidden_widths: tuple[int, ...] = (512, 256, 128, 64)
    warm_up: bool = False
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 128
    warm_up_epochs: int = 40
    warm_up_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.hidden_widths = tuple(self.hidden_widths)
        if not self.hidden_widths:
            raise ValueError("MLP baseline needs at least one hidden layer")

    @classmethod
    def from_dict(cls, d: dict | None) -> "MlpBaselineConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown MLP baseline config keys: {sorted(unknown)}")
        return cls(**d)


class MlpNet(nn.Module):
    def __init__(self, n_inputs: int, widths: Sequence[int], n_outputs: int = N_CHANNELS):
        super().__init__()
        layers: list[nn.Module] = []
        prev = n_inputs
        for w in widths:
            layers += [nn.Linear(prev, w), nn.ReLU()]
            prev = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(prev, n_outputs)

    def forward(self, x):
        return self.head(self.body(x))


def _hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def _vectors(comps, universe) -> torch.Tensor:
    try:
        return torch.tensor([c.vector(universe) for c in comps], dtype=torch.float32)
    except CompositionError as exc:
        raise CompositionError(f"MLP baseline: {exc}") from None


def _fit(net: nn.Module, x, y, xv, yv, epochs, lr, batch_size, gen) -> tuple[list[dict], int]:
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    best, best_state, selected, log = math.inf, None, 0, []
    n = x.shape[0]
    for epoch in range(1, epochs + 1):
        net.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            loss = (net(x[idx]) - y[idx]).abs().mean()
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite MLP loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        net.eval()
        with torch.no_grad():
            val = float((net(xv) - yv).abs().mean())
        log.append({"epoch": epoch, "train_mae": total / n, "val_mae": val})
        if val < best:
            best, best_state, selected = val, copy.deepcopy(net.state_dict()), epoch
    net.load_state_dict(best_state)
    net.eval()
    return log, selected


def build_mlp_baseline(universe: Sequence[str], config: MlpBaselineConfig,
                       dos_records: Sequence[DosRecord] | None = None) -> tuple[MlpNet, list[dict]]:
    """Initial network; with ``warm_up`` every layer but the output head comes from DOS pre-training."""
    universe = list(universe)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = MlpNet(len(universe), config.hidden_widths)
        if not config.warm_up:
            return net, []
        if not dos_records:
            raise ValueError("warm-up transfer needs a DOS corpus")
        recs = sorted(dos_records, key=lambda r: r.composition.key)
        rng = np.random.default_rng(config.seed)
        perm = rng.permutation(len(recs))
        n_val = max(1, len(recs) // 10)
        val = [recs[i] for i in perm[:n_val]]
        train = [recs[i] for i in perm[n_val:]]
        dos = np.stack([r.dos for r in train])
        mean, std = dos.mean(0), dos.std(0)
        std[std < 1e-8] = 1.0
        pre = MlpNet(len(universe), config.hidden_widths, dos.shape[1])
        pre.body.load_state_dict(net.body.state_dict())
        x = _vectors([r.composition for r in train], universe)
        xv = _vectors([r.composition for r in val], universe)
        y = torch.tensor((dos - mean) / std, dtype=torch.float32)
        yv = torch.tensor((np.stack([r.dos for r in val]) - mean) / std, dtype=torch.float32)
        gen = torch.Generator().manual_seed(config.seed + 1)
        log, _ = _fit(pre, x, y, xv, yv, config.warm_up_epochs, config.warm_up_lr, config.batch_size, gen)
        net.body.load_state_dict(pre.body.state_dict())
    return net, log


@dataclass
class MlpBaselineModel:
    net: MlpNet
    config: MlpBaselineConfig
    universe: list[str]
    scaler: object
    log: list[dict] = field(default_factory=list)
    warm_up_log: list[dict] = field(default_factory=list)
    selected_epoch: int = 0
    initial_hash: str = ""

    def predict(self, comps: Sequence[Composition], standardized: bool = False) -> np.ndarray:
        comps = list(comps)
        if not comps:
            return np.zeros((0, N_CHANNELS))
        with torch.no_grad():
            out = self.net(_vectors(comps, self.universe)).double().numpy()
        return out if standardized else destandardize(self.scaler, out)

    def parameter_hash(self) -> str:
        return _hash(self.net)

    def config_dict(self) -> dict:
        return asdict(self.config)


def mlp_train(instance: DataInstance, config: MlpBaselineConfig | None = None,
              dos_records: Sequence[DosRecord] | None = None,
              universe: Sequence[str] | None = None) -> MlpBaselineModel:
    config = config or MlpBaselineConfig()
    if not instance.train or not instance.validation:
        raise DataError(f"instance {instance.name}: empty train or validation split")
    if universe is None:
        els = set()
        for r in instance.train + instance.validation + instance.test:
            els.update(r.composition.elements)
        if config.warm_up and dos_records:
            for r in dos_records:
                els.update(r.composition.elements)
        universe = sorted(els)
    universe = list(universe)
    net, warm_log = build_mlp_baseline(universe, config, dos_records)
    initial = _hash(net)

    def xy(records):
        return (_vectors([r.composition for r in records], universe),
                torch.tensor(standardize(instance.scaler, np.stack([r.absorption for r in records])),
                             dtype=torch.float32))

    x, y = xy(instance.train)
    xv, yv = xy(instance.validation)
    gen = torch.Generator().manual_seed(config.seed)
    log, selected = _fit(net, x, y, xv, yv, config.epochs, config.lr, config.batch_size, gen)
    return MlpBaselineModel(net, config, universe, instance.scaler, log, warm_log, selected, initial)


def mlp_predict(model: MlpBaselineModel, comps: Sequence[Composition]) -> np.ndarray:
    return model.predict(comps)


# --------------------------------------------------------------------------
# predictions computed elsewhere


def import_external_predictions(path: str | Path, instance: DataInstance) -> np.ndarray:
    """Read ``composition,E01..E10`` predictions, aligned to ``instance.test`` order.

    Every test composition must appear exactly once and nothing else may.
    """
    path = Path(path)
    rows: dict[str, np.ndarray] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["composition", *CHANNEL_COLUMNS]:
            raise DataError(f"{path}: expected header composition,{','.join(CHANNEL_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                comp = parse_composition(row[0])
                values = np.array([float(v) for v in row[1:]])
            except (CompositionError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if values.shape != (N_CHANNELS,):
                raise DataError(f"{path}:{lineno}: expected {N_CHANNELS} values")
            if comp.key in rows:
                raise DataError(f"{path}:{lineno}: duplicate composition {comp.key}")
            rows[comp.key] = values
    test_keys = [r.key for r in instance.test]
    missing = [k for k in test_keys if k not in rows]
    if missing:
        raise DataError(f"{path}: missing test composition {missing[0]}")
    extra = sorted(set(rows) - set(test_keys))
    if extra:
        raise DataError(f"{path}: composition {extra[0]} is not in the test set")
    return np.stack([rows[k] for k in test_keys]) if test_keys else np.zeros((0, N_CHANNELS))

