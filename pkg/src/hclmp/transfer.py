"""Conditional WGAN on density-of-states data and the frozen transfer generator."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .composition import Composition, CompositionError, parse_composition
from .curation import DataError, Standardizer, fit_standardizer

log = logging.getLogger(__name__)

DOS_ENERGIES = np.round(np.linspace(-8.0, 8.0, 161), 10)
N_DOS = DOS_ENERGIES.size
DOS_COLUMNS = [f"D{i:03d}" for i in range(1, N_DOS + 1)]
CHECKPOINT_FORMAT = "hclmp-transfer-generator/1"


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class DosRecord:
    composition: Composition
    dos: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.dos, dtype=float)
        if arr.shape != (N_DOS,):
            raise DataError(f"DOS must have {N_DOS} bins, got {arr.shape}")
        if np.any(arr < 0):
            raise DataError("DOS values must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "dos", arr)


def resample_dos(energies, values) -> np.ndarray:
    """Linear interpolation onto the -8..8 eV, 0.1 eV grid, clamped at zero."""
    e = np.asarray(energies, dtype=float)
    v = np.asarray(values, dtype=float)
    if e.shape != v.shape or e.ndim != 1:
        raise DataError("energies and values must be 1-D and the same length")
    order = np.argsort(e, kind="stable")
    e, v = e[order], v[order]
    if e[0] > DOS_ENERGIES[0] + 1e-9 or e[-1] < DOS_ENERGIES[-1] - 1e-9:
        raise DataError(f"input grid [{e[0]}, {e[-1]}] does not cover [-8, 8] eV")
    return np.clip(np.interp(DOS_ENERGIES, e, v), 0.0, None)


def ingest_dos(path: str | Path) -> list[DosRecord]:
    """Read resampled CSV (``composition,D001..D161``) or raw JSON lines."""
    path = Path(path)
    out = []
    if path.suffix in (".jsonl", ".json"):
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    comp = parse_composition(obj["composition"])
                    out.append(DosRecord(comp, resample_dos(obj["energies"], obj["dos"])))
                except (KeyError, ValueError, CompositionError) as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
        return out
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "composition" or [h.strip() for h in header[1:]] != DOS_COLUMNS:
            raise DataError(f"{path}: expected header composition,D001..D{N_DOS}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != N_DOS + 1:
                raise DataError(f"{path}:{lineno}: expected {N_DOS} DOS bins, got {len(row) - 1}")
            try:
                out.append(DosRecord(parse_composition(row[0]), [float(x) for x in row[1:]]))
            except (ValueError, CompositionError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_dos(path: str | Path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["composition", *DOS_COLUMNS])
        for r in records:
            w.writerow([r.composition.format(), *(repr(float(x)) for x in r.dos)])


def split_dos_corpus(records, seed: int = 0):
    """Seeded 80/10/10 partition; validation and test sizes round down."""
    records = list(records)
    n = len(records)
    if n < 10:
        raise DataError("need at least 10 DOS records to split")
    n_val = n_test = n // 10
    perm = np.random.default_rng(seed).permutation(n)
    val = [records[i] for i in perm[:n_val]]
    test = [records[i] for i in perm[n_val:n_val + n_test]]
    train = [records[i] for i in perm[n_val + n_test:]]
    return train, val, test


@dataclass
class CwganConfig:
    noise_dim: int = 32
    generator_widths: tuple[int, ...] = (256, 512, 256)
    critic_widths: tuple[int, ...] = (256, 256, 128)
    critic_steps: int = 5
    gp_weight: float = 10.0
    lr_generator: float = 5e-4
    lr_critic: float = 5e-4
    betas: tuple[float, float] = (0.5, 0.9)
    epochs: int = 60
    batch_size: int = 64
    sample_count: int = 100
    eval_samples: int = 20
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "CwganConfig":
        d = dict(d or {})
        for k in ("generator_widths", "critic_widths", "betas"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _mlp(sizes, act=lambda: nn.LeakyReLU(0.2)) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


class Generator(nn.Module):
    def __init__(self, n_elements: int, noise_dim: int, widths=(256, 512, 256), out_dim: int = N_DOS):
        super().__init__()
        self.noise_dim = noise_dim
        self.net = _mlp([n_elements + noise_dim, *widths, out_dim])

    def forward(self, cond, z):
        return self.net(torch.cat([cond, z], dim=-1))


class Critic(nn.Module):
    def __init__(self, n_elements: int, widths=(256, 256, 128), in_dim: int = N_DOS):
        super().__init__()
        self.net = _mlp([n_elements + in_dim, *widths, 1])

    def forward(self, x, cond):
        return self.net(torch.cat([x, cond], dim=-1)).squeeze(-1)


def gradient_penalty(critic: Critic, real, fake, cond, alpha=None, generator: torch.Generator | None = None):
    """(||grad_x D(x_hat)|| - 1)^2 averaged over random interpolates x_hat."""
    if alpha is None:
        alpha = torch.rand(real.shape[0], 1, generator=generator, dtype=real.dtype)
    x_hat = (alpha * real + (1 - alpha) * fake).detach().requires_grad_(True)
    out = critic(x_hat, cond)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    return ((grad.norm(2, dim=1) - 1.0) ** 2).mean()


def _subseed(seed: int, key: str) -> int:
    h = hashlib.sha256(f"{seed}|{key}".encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


class TransferGenerator:
    """Frozen generator mapping a composition to its mean generated DOS."""

    def __init__(self, generator: Generator, elements, scaler: Standardizer,
                 sample_count: int = 100, config: CwganConfig | None = None):
        self.generator = copy.deepcopy(generator).double().eval()
        for p in self.generator.parameters():
            p.requires_grad_(False)
        self.elements = list(elements)
        self.scaler = scaler
        self.noise_dim = generator.noise_dim
        self.sample_count = sample_count
        self.config = config or CwganConfig(noise_dim=self.noise_dim)
        self._mean = torch.as_tensor(scaler.mean, dtype=torch.float64)
        self._std = torch.as_tensor(scaler.std, dtype=torch.float64)

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.generator.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def _cond(self, comps) -> torch.Tensor:
        try:
            return torch.tensor([c.vector(self.elements) for c in comps], dtype=torch.float64)
        except CompositionError as exc:
            raise CompositionError(f"transfer generator: {exc}") from None

    def _noise(self, comps, seed: int, n: int) -> torch.Tensor:
        zs = []
        for c in comps:
            g = torch.Generator().manual_seed(_subseed(seed, c.key))
            zs.append(torch.randn(n, self.noise_dim, generator=g, dtype=torch.float64))
        return torch.stack(zs)

    @torch.no_grad()
    def sample_standardized(self, comps, seed: int = 0, sample_count: int | None = None) -> torch.Tensor:
        """Raw generator samples, shape (len(comps), n, 161), standardized units."""
        n = sample_count or self.sample_count
        cond = self._cond(comps)
        z = self._noise(comps, seed, n)
        cond = cond[:, None, :].expand(-1, n, -1)
        return self.generator(cond.reshape(-1, cond.shape[-1]), z.reshape(-1, self.noise_dim)).reshape(len(comps), n, -1)

    def generate_many(self, comps, seed: int = 0, sample_count: int | None = None,
                      standardized: bool = False, chunk: int = 512) -> np.ndarray:
        comps = list(comps)
        if not comps:
            return np.zeros((0, N_DOS))
        out = []
        for i in range(0, len(comps), chunk):
            mean = self.sample_standardized(comps[i:i + chunk], seed, sample_count).mean(dim=1)
            out.append(mean if standardized else mean * self._std + self._mean)
        return torch.cat(out).numpy()

    def generate(self, c: Composition, seed: int = 0, sample_count: int | None = None) -> np.ndarray:
        return self.generate_many([c], seed, sample_count)[0]

    def save(self, path: str | Path) -> None:
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "config": _jsonable(asdict(self.config)),
            "elements": self.elements,
            "scaler": self.scaler.to_dict(),
            "sample_count": self.sample_count,
            "state_dict": self.generator.state_dict(),
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "TransferGenerator":
        ck = torch.load(path, map_location="cpu", weights_only=True)
        if ck.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: not a transfer generator checkpoint")
        config = CwganConfig.from_dict(ck["config"])
        gen = Generator(len(ck["elements"]), config.noise_dim, config.generator_widths).double()
        gen.load_state_dict(ck["state_dict"])
        return cls(gen, ck["elements"], Standardizer.from_dict(ck["scaler"]), ck["sample_count"], config)


def generate_transfer_rep(g: TransferGenerator, c: Composition, seed: int = 0) -> np.ndarray:
    return g.generate(c, seed)


def evaluate_generator(g: TransferGenerator, holdout, seed: int = 0, sample_count: int | None = None) -> float:
    """Mean absolute error of the mean generated DOS, in train-split std units."""
    holdout = list(holdout)
    if not holdout:
        raise DataError("empty holdout")
    pred = g.generate_many([r.composition for r in holdout], seed, sample_count, standardized=True)
    truth = (np.stack([r.dos for r in holdout]) - g.scaler.mean) / g.scaler.std
    return float(np.mean(np.abs(pred - truth)))


@dataclass
class CwganLog:
    epochs: list[dict] = field(default_factory=list)
    selected_epoch: int = 0

    def write_csv(self, path: str | Path) -> None:
        if not self.epochs:
            return
        keys = list(self.epochs[0])
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.epochs)


def train_cwgan(train_records, validation_records, config: CwganConfig | None = None,
                elements=None) -> tuple[TransferGenerator, CwganLog]:
    """Train the conditional WGAN-GP and return the best-validation generator."""
    config = config or CwganConfig()
    train_records = list(train_records)
    validation_records = list(validation_records)
    if not train_records or not validation_records:
        raise DataError("cWGAN training needs non-empty train and validation splits")
    if elements is None:
        els = set()
        for r in train_records + validation_records:
            els.update(r.composition.elements)
        elements = sorted(els)
    elements = list(elements)
    scaler = fit_standardizer(np.stack([r.dos for r in train_records]), allow_degenerate=True)

    gen = torch.Generator().manual_seed(config.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        G = Generator(len(elements), config.noise_dim, config.generator_widths)
        D = Critic(len(elements), config.critic_widths)

    x = torch.tensor((np.stack([r.dos for r in train_records]) - scaler.mean) / scaler.std, dtype=torch.float32)
    cond = torch.tensor([r.composition.vector(elements) for r in train_records], dtype=torch.float32)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr_generator, betas=config.betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr_critic, betas=config.betas)

    log_ = CwganLog()
    best_mae, best_state = math.inf, None
    n = x.shape[0]
    bs = min(config.batch_size, n)
    for epoch in range(1, config.epochs + 1):
        perm = torch.randperm(n, generator=gen)
        d_losses, g_losses, gaps = [], [], []
        for start in range(0, n - bs + 1, bs):
            for _ in range(config.critic_steps):
                idx = torch.randint(0, n, (bs,), generator=gen)
                real, c = x[idx], cond[idx]
                z = torch.randn(bs, config.noise_dim, generator=gen)
                with torch.no_grad():
                    fake = G(c, z)
                d_real, d_fake = D(real, c).mean(), D(fake, c).mean()
                gp = gradient_penalty(D, real, fake, c, generator=gen)
                loss_d = d_fake - d_real + config.gp_weight * gp
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                d_losses.append(loss_d.item())
                gaps.append((d_real - d_fake).item())
            c = cond[perm[start:start + bs]]
            z = torch.randn(bs, config.noise_dim, generator=gen)
            loss_g = -D(G(c, z), c).mean()
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            g_losses.append(loss_g.item())
        losses = d_losses + g_losses
        if not all(math.isfinite(v) for v in losses):
            raise TrainingDivergence(f"non-finite cWGAN loss at epoch {epoch}")
        frozen = TransferGenerator(G, elements, scaler, config.sample_count, config)
        val_mae = evaluate_generator(frozen, validation_records, seed=config.seed, sample_count=config.eval_samples)
        if not math.isfinite(val_mae):
            raise TrainingDivergence(f"non-finite generator output at epoch {epoch}")
        log_.epochs.append({
            "epoch": epoch,
            "critic_loss": float(np.mean(d_losses)) if d_losses else float("nan"),
            "generator_loss": float(np.mean(g_losses)) if g_losses else float("nan"),
            "wasserstein_gap": float(np.mean(gaps)) if gaps else float("nan"),
            "val_mae": val_mae,
        })
        log.debug("cwgan epoch %d: %s", epoch, log_.epochs[-1])
        if val_mae < best_mae:
            best_mae, best_state = val_mae, copy.deepcopy(G.state_dict())
            log_.selected_epoch = epoch
    G.load_state_dict(best_state)
    return TransferGenerator(G, elements, scaler, config.sample_count, config), log_


def untrained_generator(elements, train_records, config: CwganConfig | None = None) -> TransferGenerator:
    """Randomly initialised generator with the same standardization (reference point)."""
    config = config or CwganConfig()
    scaler = fit_standardizer(np.stack([r.dos for r in train_records]), allow_degenerate=True)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        G = Generator(len(elements), config.noise_dim, config.generator_widths)
    return TransferGenerator(G, elements, scaler, config.sample_count, config)


def _jsonable(d):
    return json.loads(json.dumps(d))
