"""``hclmp`` command line: curate, train-transfer, benchmark, predict, screen, embed, plot.

Every command reads one YAML or JSON run configuration (``--config``);
individual flags and ``--set dotted.key=value`` pairs override its keys.
The resolved configuration is echoed to ``<out_dir>/config_echo.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 benchmark
finished with failed cells.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, fields
from functools import wraps
from pathlib import Path

import click
import numpy as np
import yaml

from . import synthetic
from .composition import CompositionError, ElementTrio, canonical_symbol, enumerate_simplex_grid
from .curation import (DataError, build_instance, deployment_instance, enumerate_prediction_spaces,
                       identify_data_instances, ingest_spectra, write_spectra)
from .evaluation import EvaluationReport, ModelSpec, run_benchmark
from .model import HCLMPModel, ModelConfig, train
from .screening import ScreenCriteria, export_embedding, screen_spaces, transparency_screen
from .transfer import (CwganConfig, TransferGenerator, evaluate_generator, ingest_dos, split_dos_corpus,
                       train_cwgan, write_dos)

log = logging.getLogger("hclmp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PARTIAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    spectra: str | None = None
    dos: str | None = None
    out_dir: str = "hclmp-out"
    seeds: list[int] = field(default_factory=lambda: [0])
    setting: str = "loco"
    workers: int = 1
    trios: list[str] | None = None
    roster: list[dict] = field(default_factory=list)
    transfer: dict = field(default_factory=dict)  # checkpoint, config (cWGAN), seed
    predict: dict = field(default_factory=dict)  # model, known_trios, checkpoint, step
    screen: dict = field(default_factory=dict)  # predictions, reference, criteria, transparency
    embed: dict = field(default_factory=dict)  # sets, reducer, reducer_config
    export_channel: int | None = 6

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.setting not in ("loco", "random", "predict", "screen", "embed"):
            raise ConfigError(f"unknown setting {cfg.setting!r}")
        if not isinstance(cfg.seeds, list) or not all(isinstance(s, int) for s in cfg.seeds) or not cfg.seeds:
            raise ConfigError("seeds must be a non-empty list of integers")
        if cfg.workers < 1:
            raise ConfigError("workers must be >= 1")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def trio_list(self) -> list[ElementTrio] | None:
        if self.trios is None:
            return None
        try:
            return [ElementTrio.parse(t) for t in self.trios]
        except CompositionError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path: str | None, overrides: dict, sets: tuple[str, ...]) -> RunConfig:
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not a mapping")
        node[parts[-1]] = yaml.safe_load(value)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _echo_config(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.json").write_text(json.dumps({"command": command, "config": cfg.to_dict()},
                                                     indent=2, sort_keys=True) + "\n")
    return out


def _require(value, what: str):
    if not value:
        raise ConfigError(f"missing required config value: {what}")
    return value


def _input(path: str | None, what: str) -> Path:
    p = Path(_require(path, what))
    if not p.exists():
        raise DataError(f"{what} {p} does not exist")
    return p


def _guard(fn: Callable) -> Callable:
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            code = fn(*args, **kwargs)
        except (ConfigError, yaml.YAMLError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (DataError, CompositionError, FileNotFoundError) as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except ValueError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        sys.exit(code or EXIT_OK)
    return wrapper


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), help="YAML or JSON run configuration")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), help="output directory")(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="override a config key")(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose: int):
    """Composition-to-spectrum prediction pipeline."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


@main.command()
@common_options
@click.option("--spectra", type=click.Path())
@click.option("--seed", type=int)
@_guard
def curate(config_path, out_dir, sets, spectra, seed):
    """Find eligible 3-cation data instances and write their split manifests."""
    cfg = load_config(config_path, {"out_dir": out_dir, "spectra": spectra,
                                    "seeds": [seed] if seed is not None else None}, sets)
    table = ingest_spectra(_input(cfg.spectra, "spectra file"))
    trios = cfg.trio_list() or identify_data_instances(table)
    if not trios:
        raise DataError("no eligible instances")
    out = _echo_config(cfg, "curate")
    mdir = out / "manifests"
    mdir.mkdir(exist_ok=True)
    for trio in trios:
        build_instance(table, trio, seed=cfg.seeds[0]).write_manifest(mdir / f"{trio.name}.json")
    (out / "instances.json").write_text(json.dumps([t.name for t in trios], indent=2) + "\n")
    click.echo(f"{len(trios)} data instances -> {mdir}")


@main.command("train-transfer")
@common_options
@click.option("--dos", type=click.Path())
@click.option("--seed", type=int)
@_guard
def train_transfer(config_path, out_dir, sets, dos, seed):
    """Train the conditional WGAN-GP on a DOS corpus and save the frozen generator."""
    cfg = load_config(config_path, {"out_dir": out_dir, "dos": dos,
                                    "seeds": [seed] if seed is not None else None}, sets)
    records = ingest_dos(_input(cfg.dos, "DOS file"))
    gcfg = CwganConfig.from_dict({**cfg.transfer.get("config", {}), "seed": cfg.seeds[0]})
    train_r, val_r, test_r = split_dos_corpus(records, seed=cfg.seeds[0])
    out = _echo_config(cfg, "train-transfer")
    gen, glog = train_cwgan(train_r, val_r, gcfg)
    ckpt = Path(cfg.transfer.get("checkpoint") or out / "transfer_generator.pt")
    gen.save(ckpt)
    glog.write_csv(out / "transfer_log.csv")
    metrics = {"test_mae": evaluate_generator(gen, test_r, seed=cfg.seeds[0]),
               "selected_epoch": glog.selected_epoch, "parameter_hash": gen.parameter_hash()}
    (out / "transfer_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    click.echo(f"generator -> {ckpt} (test MAE {metrics['test_mae']:.4f})")


def _load_generator(cfg: RunConfig) -> TransferGenerator:
    path = cfg.transfer.get("checkpoint")
    if not path:
        raise ConfigError("transfer.checkpoint is required for transfer-learning models")
    if not Path(path).exists():
        raise DataError(f"generator checkpoint {path} does not exist")
    return TransferGenerator.load(path)


def cmd_benchmark(cfg: RunConfig) -> EvaluationReport:
    """Run the configured roster and write the report files into ``cfg.out_dir``."""
    if cfg.setting not in ("loco", "random"):
        raise ConfigError("benchmark setting must be loco or random")
    roster = [ModelSpec.from_dict(d) for d in _require(cfg.roster, "roster")]
    table = ingest_spectra(_input(cfg.spectra, "spectra file"))
    gen = _load_generator(cfg) if any(s.uses_transfer for s in roster) else None
    dos = ingest_dos(_input(cfg.dos, "DOS file")) if any(s.uses_dos for s in roster) else None
    out = _echo_config(cfg, "benchmark")
    return run_benchmark(table, roster, cfg.setting, cfg.seeds, gen, dos, cfg.trio_list(), cfg.workers,
                         out, cfg.export_channel)


@main.command()
@common_options
@click.option("--spectra", type=click.Path())
@click.option("--setting", type=click.Choice(["loco", "random"]))
@click.option("--workers", type=int)
@click.option("--seed", "seed_list", type=int, multiple=True)
@_guard
def benchmark(config_path, out_dir, sets, spectra, setting, workers, seed_list):
    """Train and evaluate the model roster; write report.json and CSV tables."""
    cfg = load_config(config_path, {"out_dir": out_dir, "spectra": spectra, "setting": setting,
                                    "workers": workers, "seeds": list(seed_list) or None}, sets)
    report = cmd_benchmark(cfg)
    for m in report.models:
        if m in report.scalars:
            click.echo(f"{m}: {report.scalars[m]:.4f}")
    if not report.complete:
        n = sum(len(v) for v in report.failed.values())
        click.echo(f"{n} benchmark cell(s) failed; see {Path(cfg.out_dir) / 'report.json'}", err=True)
        return EXIT_PARTIAL
    return EXIT_OK


@main.command()
@common_options
@click.option("--spectra", type=click.Path())
@click.option("--seed", type=int)
@_guard
def predict(config_path, out_dir, sets, spectra, seed):
    """Train on the whole table and predict the interiors of unmeasured 3-cation spaces."""
    cfg = load_config(config_path, {"out_dir": out_dir, "spectra": spectra,
                                    "seeds": [seed] if seed is not None else None}, sets)
    table = ingest_spectra(_input(cfg.spectra, "spectra file"))
    pcfg = cfg.predict
    elements = table.elements
    if "elements" in pcfg:
        try:
            universe = sorted({canonical_symbol(e) for e in pcfg["elements"]})
        except CompositionError as exc:
            raise ConfigError(str(exc)) from None
        unknown = sorted(set(universe) - set(elements))
        if unknown:
            raise ConfigError(f"elements without training data: {unknown}")
    else:
        universe = elements
    known = pcfg.get("known_trios", "instances")
    if known == "instances":
        known_trios = identify_data_instances(table)
    else:
        known_trios = [ElementTrio.parse(t) for t in known]
    spaces = cfg.trio_list() or enumerate_prediction_spaces(universe, known_trios)
    for t in spaces:
        missing = sorted(set(t.elements) - set(elements))
        if missing:
            raise ConfigError(f"trio {t.name} contains elements without training data: {missing}")
    mcfg = ModelConfig.from_dict({**pcfg.get("model", {}), "seed": cfg.seeds[0]})
    gen = _load_generator(cfg) if mcfg.use_transfer else None
    out = _echo_config(cfg, "predict")
    if pcfg.get("checkpoint") and Path(pcfg["checkpoint"]).exists():
        model = HCLMPModel.load(pcfg["checkpoint"])
    else:
        model = train(deployment_instance(table, seed=cfg.seeds[0]), gen, mcfg, elements=elements)
        model.save(pcfg.get("checkpoint") or out / "model.pt")
    pdir = out / "predictions"
    pdir.mkdir(exist_ok=True)
    union = []
    for trio in spaces:
        comps = [c for c, region in enumerate_simplex_grid(trio, pcfg.get("step", 0.1)) if region.value == "interior"]
        pred = model.predict(comps, gen)
        write_spectra(pdir / f"{trio.name}.csv", zip(comps, pred))
        union.extend(zip(comps, pred))
    write_spectra(out / "predictions.csv", union)
    click.echo(f"{len(spaces)} spaces, {len(union)} compositions -> {pdir}")


@main.command()
@common_options
@click.option("--predictions", type=click.Path())
@click.option("--reference", type=click.Path())
@_guard
def screen(config_path, out_dir, sets, predictions, reference):
    """Band-gap-proxy and transparency screens with subspace novelty."""
    cfg = load_config(config_path, {"out_dir": out_dir}, sets)
    scfg = dict(cfg.screen)
    if predictions:
        scfg["predictions"] = predictions
    if reference:
        scfg["reference"] = reference
    cfg.screen = scfg
    items = ingest_spectra(_input(scfg.get("predictions") or cfg.spectra, "screen.predictions"))
    ref = ingest_spectra(_input(scfg.get("reference") or cfg.spectra, "screen.reference"))
    criteria = ScreenCriteria.from_dict(scfg.get("criteria"))
    out = _echo_config(cfg, "screen")
    report = screen_spaces(items, ref, cfg.trio_list(), criteria)
    report.write(out)
    tcfg = scfg.get("transparency")
    if tcfg:
        el = canonical_symbol(tcfg["element"])
        kw = {k: tcfg[k] for k in ("min_fraction", "threshold") if k in tcfg}
        hits = [r.composition.format() for r in items if transparency_screen(r.absorption, r.composition, el, **kw)]
        (out / "transparency.json").write_text(json.dumps({"criteria": {"element": el, **kw}, "passing": sorted(hits)},
                                                          indent=2, sort_keys=True) + "\n")
    s = report.summary
    click.echo(f"{s['passing_compositions']} passing compositions in {s['passing_spaces']} spaces "
               f"({s['subspace_novel_spaces']} subspace-novel)")


@main.command()
@common_options
@click.option("--reducer", help="registered reducer name, or 'none'")
@_guard
def embed(config_path, out_dir, sets, reducer):
    """Quantile-RGB colored 2-D embedding of measured and predicted 3-cation spectra."""
    cfg = load_config(config_path, {"out_dir": out_dir}, sets)
    ecfg = dict(cfg.embed)
    if reducer:
        ecfg["reducer"] = reducer
    cfg.embed = ecfg
    set_paths = _require(ecfg.get("sets"), "embed.sets")
    tables = {}
    for tag, path in set_paths.items():
        t = ingest_spectra(_input(path, f"embed set {tag}"))
        tables[tag] = [(r.composition, r.absorption) for r in t if len(r.composition) == 3]
    name = ecfg.get("reducer", "tsne")
    out = _echo_config(cfg, "embed")
    rc = dict(ecfg.get("reducer_config") or {})
    rc.setdefault("seed", cfg.seeds[0])
    ok = export_embedding(tables, out / "embedding.csv", None if name == "none" else name, rc)
    click.echo(f"embedding -> {out / 'embedding.csv'}" + ("" if ok else " (colors only)"))


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


@main.command()
@click.argument("report_dir", type=click.Path(exists=True, file_okay=False))
@_guard
def plot(report_dir):
    """Render PNGs from a benchmark or embed output directory."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = Path(report_dir)
    made = 0
    curves = _read_csv(d / "curves.csv")
    if curves:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        energy = [float(r["energy_ev"]) for r in curves]
        for name in list(curves[0])[1:]:
            ax.plot(energy, [float(r[name]) if r[name] else np.nan for r in curves], marker="o", label=name)
        ax.set_xlabel("photon energy (eV)")
        ax.set_ylabel("standardized MAE")
        ax.legend()
        fig.tight_layout()
        fig.savefig(d / "curves.png", dpi=120)
        plt.close(fig)
        made += 1
    for f in sorted((d / "ternary").glob("*.csv")):
        rows = _read_csv(f)
        if not rows:
            continue
        fig, ax = plt.subplots(figsize=(4, 3.5))
        sc = ax.scatter([float(r["x"]) for r in rows], [float(r["y"]) for r in rows],
                        c=[float(r["value"]) for r in rows], cmap="viridis", s=30)
        fig.colorbar(sc, ax=ax)
        ax.set_aspect("equal")
        ax.set_title(f.stem)
        fig.savefig(f.with_suffix(".png"), dpi=120)
        plt.close(fig)
        made += 1
    rows = [r for r in _read_csv(d / "embedding.csv") if r["x"]]
    if rows:
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.scatter([float(r["x"]) for r in rows], [float(r["y"]) for r in rows],
                   c=[[float(r[k]) for k in "rgb"] for r in rows], s=8)
        fig.savefig(d / "embedding.png", dpi=120)
        plt.close(fig)
        made += 1
    click.echo(f"{made} figure(s) written to {d}")


@main.command()
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0)
@click.option("--n-dos", type=int, default=1500)
@_guard
def synthesize(out_dir, seed, n_dos):
    """Write a synthetic spectra table and DOS corpus for trying the pipeline."""
    world, train_trios, eval_trios = synthetic.benchmark_world(seed)
    table = synthetic.make_spectra_table(world, train_trios + eval_trios, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_spectra(out / "spectra.csv", ((r.composition, r.absorption) for r in table))
    write_dos(out / "dos.csv", synthetic.make_dos_records(world, n_dos, seed=seed))
    click.echo(f"{len(table)} spectra, {n_dos} DOS records -> {out}")


if __name__ == "__main__":
    main()
