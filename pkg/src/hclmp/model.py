"""H-CLMP: element-attention encoder, aligned latents and the hierarchical decoder.

Component (a) maps a composition (plus, optionally, its generated DOS) to a
diagonal Gaussian latent; component (b) maps the standardized targets to a
latent of the same size. Both decode through a per-component property mean
head, a property covariance factor shared by the two components, and a
property graph attention network that is also shared.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .composition import Composition, CompositionError
from .curation import DataError, DataInstance, Standardizer, destandardize, standardize
from .transfer import TrainingDivergence, TransferGenerator

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hclmp-model/1"
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    latent_dim: int = 128
    n_properties: int = 10
    property_embed_dim: int = 512
    gat_layers: int = 5
    gat_attention_dim: int = 128
    gat_ffn_widths: tuple[int, ...] = (128, 128)
    label_encoder_widths: tuple[int, ...] = (256, 256)
    element_embed_dim: int = 64
    encoder_hidden: int = 128
    encoder_layers: int = 3
    use_transfer: bool = False
    use_vae_alignment: bool = True
    decoder_kind: str = "hierarchical"  # or "mlp"
    mlp_decoder_widths: tuple[int, ...] = (256, 256, 256)
    embedding_sampling: str = "joint"  # or "marginal"
    reconstruction_loss: bool = True
    kl_direction: str = "label_to_feature"  # KL(b || a); "feature_to_label" is KL(a || b)
    kl_weight: float = 0.1
    # initial log-variances: latent posteriors and the diagonal of the property covariance factor
    latent_log_var_init: float = -4.0
    covariance_log_diag_init: float = -4.0
    lr: float = 5e-4
    lr_halve_epochs: tuple[int, ...] = (20,)
    batch_size: int = 128
    epochs: int = 40
    seed: int = 0
    inference_seed: int = 0
    transfer_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.decoder_kind not in ("hierarchical", "mlp"):
            raise ValueError(f"unknown decoder_kind {self.decoder_kind!r}")
        if self.embedding_sampling not in ("joint", "marginal"):
            raise ValueError(f"unknown embedding_sampling {self.embedding_sampling!r}")
        if self.kl_direction not in ("label_to_feature", "feature_to_label"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        for name in ("gat_ffn_widths", "label_encoder_widths", "mlp_decoder_widths", "lr_halve_epochs"):
            setattr(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModelConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``."""
        return self.lr * 0.5 ** sum(epoch > m for m in self.lr_halve_epochs)


@dataclass
class LatentGaussian:
    mu: torch.Tensor
    log_var: torch.Tensor

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mu.shape, generator=generator, dtype=self.mu.dtype)
        return self.mu + torch.exp(0.5 * self.log_var) * eps


def mlp(sizes: Sequence[int], act: type[nn.Module] = nn.SiLU, final_act: bool = False) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if final_act or i < len(sizes) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


def _weighted_softmax(logits, weights, mask, dim=-1):
    # softmax of logits weighted by fractions; masked entries get exactly zero weight
    logw = torch.log(weights.clamp_min(1e-30))
    z = torch.where(mask, logits + logw, torch.full_like(logits, -math.inf))
    return torch.softmax(z, dim=dim)


class ElementMessageLayer(nn.Module):
    """One round of fraction-weighted soft-attention message passing."""

    def __init__(self, hidden: int):
        super().__init__()
        self.gate = mlp([2 * hidden, hidden, 1])
        self.message = mlp([2 * hidden, hidden, hidden])

    def forward(self, x, frac, mask):
        n = x.shape[1]
        pair = torch.cat([x[:, :, None, :].expand(-1, -1, n, -1), x[:, None, :, :].expand(-1, n, -1, -1)], dim=-1)
        logits = self.gate(pair).squeeze(-1)  # (B, i, j)
        w = frac[:, None, :].expand(-1, n, -1)
        m = mask[:, None, :].expand(-1, n, -1)
        att = _weighted_softmax(logits, w, m)
        return x + torch.einsum("bij,bijh->bih", att, self.message(pair))


class FeatureEncoder(nn.Module):
    """Element-attention graph encoder producing a diagonal Gaussian latent."""

    def __init__(self, n_elements: int, cfg: ModelConfig, extra_dim: int = 0):
        super().__init__()
        h = cfg.encoder_hidden
        self.extra_dim = extra_dim
        self.embedding = nn.Embedding(n_elements, cfg.element_embed_dim)
        self.input = nn.Linear(cfg.element_embed_dim + 1 + extra_dim, h)
        self.layers = nn.ModuleList(ElementMessageLayer(h) for _ in range(cfg.encoder_layers))
        self.pool_gate = mlp([h, h, 1])
        self.pool_message = mlp([h, h, h])
        self.mu = nn.Linear(h, cfg.latent_dim)
        self.log_var = nn.Linear(h, cfg.latent_dim)
        nn.init.constant_(self.log_var.bias, cfg.latent_log_var_init)

    def forward(self, elem, frac, mask, extra=None) -> LatentGaussian:
        x = self.embedding(elem)
        parts = [x, frac[..., None]]
        if self.extra_dim:
            parts.append(extra[:, None, :].expand(-1, x.shape[1], -1))
        x = self.input(torch.cat(parts, dim=-1))
        for layer in self.layers:
            x = layer(x, frac, mask)
        att = _weighted_softmax(self.pool_gate(x).squeeze(-1), frac, mask)
        pooled = torch.einsum("bn,bnh->bh", att, self.pool_message(x))
        return LatentGaussian(self.mu(pooled), self.log_var(pooled))


class LabelEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, extra_dim: int = 0):
        super().__init__()
        self.n_properties = cfg.n_properties
        self.extra_dim = extra_dim
        self.body = mlp([cfg.n_properties + extra_dim, *cfg.label_encoder_widths], final_act=True)
        self.mu = nn.Linear(cfg.label_encoder_widths[-1], cfg.latent_dim)
        self.log_var = nn.Linear(cfg.label_encoder_widths[-1], cfg.latent_dim)
        nn.init.constant_(self.log_var.bias, cfg.latent_log_var_init)

    def forward(self, y, extra=None) -> LatentGaussian:
        if y.shape[-1] != self.n_properties:
            raise ValueError(f"label encoder expects {self.n_properties} targets, got {y.shape[-1]}")
        h = self.body(torch.cat([y, extra], dim=-1) if self.extra_dim else y)
        return LatentGaussian(self.mu(h), self.log_var(h))


class SharedCovariance(nn.Module):
    """Lower-triangular factor L (positive diagonal) of the property covariance L L^T."""

    def __init__(self, n: int, log_diag_init: float = 0.0):
        super().__init__()
        self.n = n
        self.offdiag = nn.Parameter(torch.zeros(n * (n - 1) // 2))
        self.log_diag = nn.Parameter(torch.full((n,), float(log_diag_init)))
        self.register_buffer("_tril", torch.tril_indices(n, n, -1), persistent=False)

    def factor(self) -> torch.Tensor:
        L = torch.diag_embed(torch.exp(self.log_diag))
        return L.index_put((self._tril[0], self._tril[1]), self.offdiag)

    def covariance(self) -> torch.Tensor:
        L = self.factor()
        return L @ L.T

    def set_factor(self, L: torch.Tensor) -> None:
        L = torch.as_tensor(L, dtype=self.log_diag.dtype)
        with torch.no_grad():
            self.log_diag.copy_(torch.log(torch.diagonal(L)))
            self.offdiag.copy_(L[self._tril[0], self._tril[1]])


class PropertyGATLayer(nn.Module):
    def __init__(self, dim: int, att_dim: int, ffn_widths: Sequence[int]):
        super().__init__()
        self.proj = nn.Linear(dim, att_dim, bias=False)
        self.att_src = nn.Parameter(torch.randn(att_dim) / math.sqrt(att_dim))
        self.att_dst = nn.Parameter(torch.randn(att_dim) / math.sqrt(att_dim))
        self.ffn = mlp([att_dim, *ffn_widths, dim])

    def forward(self, x):
        h = self.proj(x)  # (B, P, A)
        e = F.leaky_relu((h @ self.att_src)[:, :, None] + (h @ self.att_dst)[:, None, :], 0.2)
        return x + self.ffn(torch.softmax(e, dim=-1) @ h)


class PropertyGAT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            PropertyGATLayer(cfg.property_embed_dim, cfg.gat_attention_dim, cfg.gat_ffn_widths)
            for _ in range(cfg.gat_layers))
        self.readout_weight = nn.Parameter(torch.randn(cfg.n_properties, cfg.property_embed_dim)
                                           / math.sqrt(cfg.property_embed_dim))
        self.readout_bias = nn.Parameter(torch.zeros(cfg.n_properties))

    def forward(self, emb):
        for layer in self.layers:
            emb = layer(emb)
        return (emb * self.readout_weight).sum(-1) + self.readout_bias


def _check_finite(t: torch.Tensor, stage: str) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values after {stage}")


class HierarchicalDecoder(nn.Module):
    """Property mean head -> correlated 10 x S embeddings -> property GAT -> scalars."""

    def __init__(self, cfg: ModelConfig, covariance: SharedCovariance, gat: PropertyGAT):
        super().__init__()
        self.sampling = cfg.embedding_sampling
        self.mu_head = nn.Linear(cfg.latent_dim, cfg.n_properties)
        self.covariance = covariance
        self.gat = gat

    def property_embeddings(self, mu_prop, eps):
        # eps: (B, S, P) or (S, P) standard normal draws
        L = self.covariance.factor()
        if self.sampling == "joint":
            noise = eps @ L.T
        else:
            noise = eps * torch.sqrt(torch.diagonal(L @ L.T))
        samples = mu_prop[:, None, :] + noise
        return samples.transpose(1, 2)  # (B, P, S): row i holds the S draws of property i

    def forward(self, z, eps):
        mu_prop = self.mu_head(z)
        _check_finite(mu_prop, "property mean head")
        emb = self.property_embeddings(mu_prop, eps)
        _check_finite(emb, "property embedding sampling")
        pred = self.gat(emb)
        _check_finite(pred, "property graph attention")
        return pred, mu_prop


class MLPDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = mlp([cfg.latent_dim, *cfg.mlp_decoder_widths, cfg.n_properties], act=nn.ReLU)

    def forward(self, z, eps=None):
        pred = self.net(z)
        _check_finite(pred, "mlp decoder")
        return pred, None


class HCLMPNet(nn.Module):
    def __init__(self, n_elements: int, cfg: ModelConfig, transfer_dim: int = 0):
        super().__init__()
        self.cfg = cfg
        extra = transfer_dim if cfg.use_transfer else 0
        self.feature_encoder = FeatureEncoder(n_elements, cfg, extra)
        self.label_encoder = LabelEncoder(cfg, extra) if cfg.use_vae_alignment else None
        if cfg.decoder_kind == "hierarchical":
            self.covariance = SharedCovariance(cfg.n_properties, cfg.covariance_log_diag_init)
            gat = PropertyGAT(cfg)
            self.decoders = nn.ModuleDict({
                c: HierarchicalDecoder(cfg, self.covariance, gat)
                for c in (("a", "b") if cfg.use_vae_alignment else ("a",))
            })
        else:
            self.covariance = None
            shared = MLPDecoder(cfg)
            self.decoders = nn.ModuleDict({c: shared for c in (("a", "b") if cfg.use_vae_alignment else ("a",))})
        g = torch.Generator().manual_seed(cfg.inference_seed)
        self.register_buffer("inference_eps", torch.randn(cfg.property_embed_dim, cfg.n_properties, generator=g))

    def decode(self, z, component: str = "a", eps=None):
        if eps is None:
            eps = self.inference_eps
        return self.decoders[component](z, eps)


def kl_alignment(a: LatentGaussian, b: LatentGaussian, direction: str = "label_to_feature") -> torch.Tensor:
    """Closed-form KL between diagonal Gaussians, summed over dims, averaged over a batch.

    ``label_to_feature`` gives KL(b || a), ``feature_to_label`` gives KL(a || b).
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"latent dimension mismatch: {tuple(a.mu.shape)} vs {tuple(b.mu.shape)}")
    q, p = (b, a) if direction == "label_to_feature" else (a, b)
    kl = 0.5 * (p.log_var - q.log_var + (torch.exp(q.log_var) + (q.mu - p.mu) ** 2) / torch.exp(p.log_var) - 1.0)
    kl = kl.sum(-1)
    return kl.mean() if kl.ndim else kl


def training_loss(pred, target, lat_a: LatentGaussian | None, lat_b: LatentGaussian | None,
                  config: ModelConfig, recon=None) -> torch.Tensor:
    """MAE (plus component (b) reconstruction MAE) + kl_weight * KL alignment."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    loss = (pred - target).abs().mean()
    if recon is not None and config.reconstruction_loss:
        if recon.shape != target.shape:
            raise ValueError("reconstruction shape mismatch")
        loss = loss + (recon - target).abs().mean()
    if config.use_vae_alignment and lat_a is not None and lat_b is not None:
        loss = loss + config.kl_weight * kl_alignment(lat_a, lat_b, config.kl_direction)
    return loss


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    elem: torch.Tensor
    frac: torch.Tensor
    mask: torch.Tensor
    extra: torch.Tensor | None = None
    y: torch.Tensor | None = None

    def subset(self, idx) -> "Batch":
        n = int(self.mask[idx].sum(-1).max())
        return Batch(self.elem[idx, :n], self.frac[idx, :n], self.mask[idx, :n],
                     None if self.extra is None else self.extra[idx],
                     None if self.y is None else self.y[idx])


def featurize(comps: Sequence[Composition], vocab: dict[str, int], dtype=torch.float32) -> Batch:
    n = max(len(c) for c in comps)
    elem = torch.zeros(len(comps), n, dtype=torch.long)
    frac = torch.zeros(len(comps), n, dtype=dtype)
    mask = torch.zeros(len(comps), n, dtype=torch.bool)
    for i, c in enumerate(comps):
        for j, (el, f) in enumerate(c.items()):
            if el not in vocab:
                raise CompositionError(f"element {el} has no learned embedding")
            elem[i, j] = vocab[el]
            frac[i, j] = f
            mask[i, j] = True
    return Batch(elem, frac, mask)


# --------------------------------------------------------------------------
# trained model


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    selected_epoch: int = 0

    def write_csv(self, path: str | Path) -> None:
        if not self.epochs:
            return
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.epochs[0]))
            w.writeheader()
            w.writerows(self.epochs)


class HCLMPModel:
    """A trained H-CLMP / H-CLMP(T) predictor with its scaler and training log."""

    def __init__(self, net: HCLMPNet, config: ModelConfig, elements: Sequence[str], scaler: Standardizer,
                 transfer_stats: Standardizer | None = None, log: TrainingLog | None = None, instance: str = ""):
        self.net = net.eval()
        self.config = config
        self.elements = list(elements)
        self.vocab = {e: i for i, e in enumerate(self.elements)}
        self.scaler = scaler
        self.transfer_stats = transfer_stats
        self.log = log or TrainingLog()
        self.instance = instance

    @property
    def selected_epoch(self) -> int:
        return self.log.selected_epoch

    @property
    def dtype(self):
        return _DTYPES[self.config.dtype]

    def batch(self, comps, transfer: TransferGenerator | None = None, targets=None) -> Batch:
        if self.config.use_transfer and transfer is None:
            raise ValueError("model was trained with transfer learning; a transfer generator is required")
        if not self.config.use_transfer and transfer is not None:
            raise ValueError("model was trained without transfer learning; do not pass a transfer generator")
        b = featurize(comps, self.vocab, self.dtype)
        if transfer is not None:
            reps = transfer.generate_many(comps, seed=self.config.transfer_seed)
            b.extra = torch.as_tensor((reps - self.transfer_stats.mean) / self.transfer_stats.std, dtype=self.dtype)
        if targets is not None:
            b.y = torch.as_tensor(np.asarray(targets), dtype=self.dtype)
        return b

    @torch.no_grad()
    def predict_batch(self, b: Batch, mc_samples: int = 0, seed: int = 0) -> torch.Tensor:
        """Standardized predictions of component (a)."""
        self.net.eval()
        lat = self.net.feature_encoder(b.elem, b.frac, b.mask, b.extra)
        if not mc_samples:
            return self.net.decode(lat.mu, "a")[0]
        g = torch.Generator().manual_seed(seed)
        acc = 0
        for _ in range(mc_samples):
            eps = torch.randn(lat.mu.shape[0], self.config.property_embed_dim, self.config.n_properties,
                              generator=g, dtype=lat.mu.dtype)
            acc = acc + self.net.decode(lat.sample(g), "a", eps)[0]
        return acc / mc_samples

    def predict(self, comps: Sequence[Composition], transfer: TransferGenerator | None = None,
                standardized: bool = False, mc_samples: int = 0, seed: int = 0) -> np.ndarray:
        comps = list(comps)
        if not comps:
            return np.zeros((0, self.config.n_properties))
        out = self.predict_batch(self.batch(comps, transfer), mc_samples, seed).double().numpy()
        return out if standardized else destandardize(self.scaler, out)

    def parameter_hash(self) -> str:
        return parameter_hash(self.net)

    def save(self, path: str | Path) -> None:
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "elements": self.elements,
            "scaler": self.scaler.to_dict(),
            "transfer_stats": self.transfer_stats.to_dict() if self.transfer_stats else None,
            "transfer_dim": self.net.feature_encoder.extra_dim,
            "instance": self.instance,
            "log": {"epochs": self.log.epochs, "selected_epoch": self.log.selected_epoch},
            "state_dict": self.net.state_dict(),
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "HCLMPModel":
        ck = torch.load(path, map_location="cpu", weights_only=True)
        if ck.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: not an H-CLMP checkpoint")
        cfg = ModelConfig.from_dict(ck["config"])
        net = HCLMPNet(len(ck["elements"]), cfg, ck["transfer_dim"]).to(_DTYPES[cfg.dtype])
        net.load_state_dict(ck["state_dict"])
        ts = Standardizer.from_dict(ck["transfer_stats"]) if ck["transfer_stats"] else None
        return cls(net, cfg, ck["elements"], Standardizer.from_dict(ck["scaler"]), ts,
                   TrainingLog(ck["log"]["epochs"], ck["log"]["selected_epoch"]), ck["instance"])


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_net(elements: Sequence[str], config: ModelConfig, transfer_dim: int = 0) -> HCLMPNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = HCLMPNet(len(elements), config, transfer_dim)
    return net.to(_DTYPES[config.dtype])


def _elements_of(records) -> list[str]:
    els = set()
    for r in records:
        els.update(r.composition.elements)
    return sorted(els)


def standardized_mae_matrix(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - truth)))


def train(instance: DataInstance, transfer: TransferGenerator | None = None, config: ModelConfig | None = None,
          validation_metric: Callable[[int, np.ndarray, np.ndarray], float] | None = None,
          elements: Sequence[str] | None = None) -> HCLMPModel:
    """Jointly train components (a) and (b) on one data instance.

    Validation MAE (standardized, component (a) only, deterministic mode) is
    computed after every epoch and the parameters of the best epoch are
    returned. ``validation_metric(epoch, pred, truth)`` overrides the
    selection metric.
    """
    cfg = config or ModelConfig()
    if cfg.use_transfer != (transfer is not None):
        raise ValueError("transfer generator must be given exactly when use_transfer is set")
    if not instance.train or not instance.validation:
        raise DataError(f"instance {instance.name}: empty train or validation split")
    elements = list(elements) if elements is not None else _elements_of(instance.train + instance.validation)
    dtype = _DTYPES[cfg.dtype]
    vocab = {e: i for i, e in enumerate(elements)}
    scaler = instance.scaler

    def make_batch(records):
        comps = [r.composition for r in records]
        b = featurize(comps, vocab, dtype)
        b.y = torch.as_tensor(standardize(scaler, np.stack([r.absorption for r in records])), dtype=dtype)
        return b, comps

    train_b, train_c = make_batch(instance.train)
    val_b, val_c = make_batch(instance.validation)
    transfer_stats = None
    transfer_dim = 0
    if transfer is not None:
        reps_train = transfer.generate_many(train_c, seed=cfg.transfer_seed)
        reps_val = transfer.generate_many(val_c, seed=cfg.transfer_seed)
        std = reps_train.std(0)
        std[std < 1e-8] = 1.0
        transfer_stats = Standardizer(reps_train.mean(0), std)
        train_b.extra = torch.as_tensor((reps_train - transfer_stats.mean) / std, dtype=dtype)
        val_b.extra = torch.as_tensor((reps_val - transfer_stats.mean) / std, dtype=dtype)
        transfer_dim = reps_train.shape[1]

    net = build_net(elements, cfg, transfer_dim)
    model = HCLMPModel(net, cfg, elements, scaler, transfer_stats, TrainingLog(), instance.name)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = train_b.y.shape[0]
    best, best_state = math.inf, None
    val_truth = val_b.y.double().numpy()
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        perm = torch.randperm(n, generator=gen)
        total, total_mae, seen = 0.0, 0.0, 0
        for start in range(0, n, cfg.batch_size):
            b = train_b.subset(perm[start:start + cfg.batch_size])
            loss, pred_a = _step_loss(net, b, cfg, gen)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            k = b.y.shape[0]
            total += loss.item() * k
            total_mae += (pred_a - b.y).abs().mean().item() * k
            seen += k
        val_pred = model.predict_batch(val_b).double().numpy()
        val_mae = (validation_metric(epoch, val_pred, val_truth) if validation_metric
                   else standardized_mae_matrix(val_pred, val_truth))
        model.log.epochs.append({
            "epoch": epoch, "lr": lr, "train_loss": total / seen, "train_mae": total_mae / seen,
            "val_mae": val_mae, "param_hash": parameter_hash(net),
        })
        log.debug("%s epoch %d: %s", instance.name, epoch, model.log.epochs[-1])
        if val_mae < best:
            best, best_state = val_mae, copy.deepcopy(net.state_dict())
            model.log.selected_epoch = epoch
    net.load_state_dict(best_state)
    net.eval()
    return model


def _step_loss(net: HCLMPNet, b: Batch, cfg: ModelConfig, gen: torch.Generator | None, eps=None):
    """Training loss for one batch; ``eps`` fixes every random draw (gradient checks)."""
    eps = eps or {}
    lat_a = net.feature_encoder(b.elem, b.frac, b.mask, b.extra)
    z_a = lat_a.mu + torch.exp(0.5 * lat_a.log_var) * _draw(eps, "z_a", lat_a.mu.shape, gen, lat_a.mu.dtype)
    shape = (b.y.shape[0], cfg.property_embed_dim, cfg.n_properties)
    pred_a, _ = net.decode(z_a, "a", _draw(eps, "emb_a", shape, gen, z_a.dtype))
    lat_b = recon = None
    if cfg.use_vae_alignment:
        lat_b = net.label_encoder(b.y, b.extra)
        z_b = lat_b.mu + torch.exp(0.5 * lat_b.log_var) * _draw(eps, "z_b", lat_b.mu.shape, gen, lat_b.mu.dtype)
        recon, _ = net.decode(z_b, "b", _draw(eps, "emb_b", shape, gen, z_b.dtype))
    return training_loss(pred_a, b.y, lat_a, lat_b, cfg, recon=recon), pred_a


def _draw(eps: dict, name: str, shape, gen, dtype):
    if name in eps:
        return eps[name]
    return torch.randn(shape, generator=gen, dtype=dtype)


def predict(model: HCLMPModel, compositions, transfer: TransferGenerator | None = None, **kw) -> np.ndarray:
    return model.predict(compositions, transfer, **kw)


def encode_features(model: HCLMPModel, c: Composition, transfer: TransferGenerator | None = None) -> LatentGaussian:
    b = model.batch([c], transfer)
    with torch.no_grad():
        lat = model.net.feature_encoder(b.elem, b.frac, b.mask, b.extra)
    return LatentGaussian(lat.mu[0], lat.log_var[0])
