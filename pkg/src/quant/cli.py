"""``quant`` command line: fetch, train, backtest, report and selftest.

Configuration is one TOML file with the tables ``[data]``, ``[split]``,
``[universe]``, ``[env]``, ``[train]`` and ``[metrics]`` plus the top-level keys
``seed`` and ``output_dir``. Flags override the file. The master ``--seed`` is
fanned out to every component with splitmix64 (see :mod:`quant.seeding`);
training run ``i`` uses ``derive_seed(seed, "run<i>")``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zipfile
from dataclasses import asdict, dataclass, field, fields
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli
import tomli_w

from . import __version__
from .agents import CemPlanner, HoldActor, PetsController, SacAgent, TrainConfig, Variant, evaluate, train
from .agents.loop import TrainingDiverged
from .backtest import EquityCurve, MetricsReport, baseline_curve, mean_report, metrics, render_table, report
from .dynamics import EnsembleModel
from .fixtures import crash_market, drift_market
from .indicators import WARMUP_DAYS
from .market_data import (
    DataError, FetchError, Universe, align, default_cache_dir, fetch_remote, load_csv, rank_by_turnover,
    read_bars,
)
from .seeding import component_rng, derive_seed
from .selftest import render as render_checks
from .selftest import run_checks
from .trading_env import EnvConfig, TradingEnv, make_slice

logger = logging.getLogger("quant")

CHECKPOINT_NAME = "checkpoint.zip"
HISTORY_NAME = "history.csv"
FIXTURES = {"crash": crash_market, "drift": drift_market}


class ConfigError(ValueError):
    pass


def _from_table(cls, table: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    return cls(**table)


@dataclass
class DataConfig:
    csv: str = ""                 # aligned bars file; when empty, cached tickers are loaded
    tickers: list[str] = field(default_factory=list)
    endpoint: str = ""
    start: str = ""
    end: str = ""
    cache_dir: str = ""           # empty -> QUANT_CACHE_DIR or the user cache
    fixture: str = ""             # "crash" or "drift": built-in synthetic market
    index_csv: str = ""           # single-ticker bars used as the buy-and-hold baseline

    def __post_init__(self) -> None:
        if self.fixture and self.fixture not in FIXTURES:
            raise ConfigError(f"unknown fixture {self.fixture!r}; choose from {sorted(FIXTURES)}")


@dataclass
class SplitConfig:
    train_end: str = ""
    val_end: str = ""
    warmup_days: int = WARMUP_DAYS
    train_fraction: float = 0.7   # used only when no split dates are given
    val_fraction: float = 0.15

    def __post_init__(self) -> None:
        if bool(self.train_end) != bool(self.val_end):
            raise ConfigError("set both train_end and val_end, or neither")
        if self.warmup_days < 0:
            raise ConfigError("warmup_days must be non-negative")
        if not (0 < self.train_fraction and 0 < self.val_fraction and self.train_fraction + self.val_fraction < 1):
            raise ConfigError("split fractions must be positive and sum below 1")


@dataclass
class UniverseConfig:
    k: int = 0                    # 0 keeps every ticker
    turnover_window: int = 20

    def __post_init__(self) -> None:
        if self.k < 0 or self.turnover_window < 1:
            raise ConfigError("universe k must be >= 0 and turnover_window >= 1")


@dataclass
class MetricsConfig:
    risk_free: float = 0.0
    runs: int = 1                 # independent training seeds, averaged in the backtest

    def __post_init__(self) -> None:
        if self.runs < 1:
            raise ConfigError("metrics.runs must be at least 1")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "runs"
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": asdict(self.data),
            "split": asdict(self.split),
            "universe": asdict(self.universe),
            "env": asdict(self.env),
            "train": self.train.to_dict(),
            "metrics": asdict(self.metrics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        sections = {"data", "split", "universe", "env", "train", "metrics"}
        unknown = set(d) - sections - {"seed", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                data=_from_table(DataConfig, d.get("data", {}), "data"),
                split=_from_table(SplitConfig, d.get("split", {}), "split"),
                universe=_from_table(UniverseConfig, d.get("universe", {}), "universe"),
                env=_from_table(EnvConfig, d.get("env", {}), "env"),
                train=TrainConfig.from_dict(d.get("train", {})),
                metrics=_from_table(MetricsConfig, d.get("metrics", {}), "metrics"),
                output_dir=str(d.get("output_dir", "runs")),
                seed=int(d.get("seed", 0)),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> RunConfig:
        try:
            return cls.from_dict(tomli.loads(text))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None


# --- data -----------------------------------------------------------------------------------

def _parse_date(text: str, what: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise ConfigError(f"{what}: expected YYYY-MM-DD, got {text!r}") from None


def _cache_dir(cfg: RunConfig) -> Path:
    return Path(cfg.data.cache_dir) if cfg.data.cache_dir else default_cache_dir()


@dataclass
class Dataset:
    universe: Universe
    train: tuple[int, int]        # [start, stop) day indices into ``universe``
    val: tuple[int, int]
    test: tuple[int, int]


def load_dataset(cfg: RunConfig) -> Dataset:
    """Load bars, pick the universe and compute split boundaries.

    Indicators are computed on the full history, so each split keeps its
    preceding days as warm-up context.
    """
    if cfg.data.fixture:
        u, start = FIXTURES[cfg.data.fixture]()
        if not cfg.split.train_end:
            # fixtures are smoke-test markets: every split covers the tradeable window
            window = (start, u.n_days)
            return Dataset(u, window, window, window)
    elif cfg.data.csv:
        u = load_csv(cfg.data.csv)
    elif cfg.data.tickers:
        cache = _cache_dir(cfg)
        bars = []
        for ticker in cfg.data.tickers:
            path = cache / f"{ticker}.csv"
            if not path.exists():
                raise DataError(f"{ticker} is not cached in {cache}; run `quant fetch` first")
            bars.extend(read_bars(path.read_text(encoding="utf-8"), source=str(path)))
        lo = _parse_date(cfg.data.start, "data.start") if cfg.data.start else date.min
        hi = _parse_date(cfg.data.end, "data.end") if cfg.data.end else date.max
        u = align(b for b in bars if lo <= b.date <= hi)
    else:
        raise ConfigError("no data source: set data.csv, data.tickers or data.fixture")

    if cfg.split.train_end:
        train_end = _parse_date(cfg.split.train_end, "split.train_end")
        val_end = _parse_date(cfg.split.val_end, "split.val_end")
        if not train_end < val_end:
            raise DataError("train_end must precede val_end")
        days = np.array([d.toordinal() for d in u.calendar])
        i = int(np.searchsorted(days, train_end.toordinal(), side="right"))
        j = int(np.searchsorted(days, val_end.toordinal(), side="right"))
    else:
        usable = u.n_days - cfg.split.warmup_days
        i = cfg.split.warmup_days + int(usable * cfg.split.train_fraction)
        j = i + int(usable * cfg.split.val_fraction)
    w = min(cfg.split.warmup_days, i)
    bounds = ((w, i), (i, j), (j, u.n_days))
    if any(stop - start < 2 for start, stop in bounds):
        raise DataError(f"split leaves a partition shorter than two days: {bounds}")

    if cfg.universe.k and cfg.universe.k < u.n_stocks:
        chosen = rank_by_turnover(u.slice_days(0, i), cfg.universe.turnover_window, cfg.universe.k)
        u = u.select(sorted(chosen))
    return Dataset(u, *bounds)


def _env(ds: Dataset, cfg: RunConfig, split: str) -> TradingEnv:
    start, stop = getattr(ds, split)
    return TradingEnv(make_slice(ds.universe, cfg.env, start, stop), cfg.env)


# --- checkpoints ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, kind: str, tickers: Sequence[str], config: RunConfig,
                    agent: SacAgent | None = None, model: EnsembleModel | None = None) -> None:
    """Zip of ``meta.json`` plus ``agent.npz`` / ``model.npz`` when present."""
    if kind not in ("sac", "pets", "hold"):
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    meta = {"version": __version__, "kind": kind, "tickers": list(tickers), "config": config.to_dict()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        if agent is not None:
            zf.writestr("agent.npz", agent.to_bytes())
        if model is not None:
            zf.writestr("model.npz", model.to_bytes())


@dataclass
class Checkpoint:
    kind: str
    tickers: list[str]
    config: RunConfig
    agent: SacAgent | None = None
    model: EnsembleModel | None = None

    def actor(self, action_dim: int, rng: np.random.Generator):
        if self.kind == "hold":
            return HoldActor(action_dim)
        if self.kind == "sac":
            return self.agent
        t = self.config.train
        planner = CemPlanner(action_dim, t.cem_horizon, t.cem_population, t.cem_elites, t.cem_iterations)
        return PetsController(planner, self.model, rng)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            names = set(zf.namelist())
            agent = SacAgent.from_bytes(zf.read("agent.npz"))[0] if "agent.npz" in names else None
            model = EnsembleModel.from_bytes(zf.read("model.npz")) if "model.npz" in names else None
    except (zipfile.BadZipFile, KeyError) as exc:
        raise DataError(f"{path}: not a valid checkpoint ({exc})") from None
    return Checkpoint(meta["kind"], meta["tickers"], RunConfig.from_dict(meta["config"]), agent, model)


# --- commands ------------------------------------------------------------------------------

def cmd_fetch(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    if not cfg.data.tickers:
        raise ConfigError("data.tickers is empty")
    if not (cfg.data.start and cfg.data.end):
        raise ConfigError("data.start and data.end are required for fetch")
    start, end = _parse_date(cfg.data.start, "data.start"), _parse_date(cfg.data.end, "data.end")
    cache = _cache_dir(cfg)
    failed = []
    for ticker in cfg.data.tickers:
        try:
            series = fetch_remote(ticker, start, end, cfg.data.endpoint, cache_dir=cache)
        except FetchError as exc:
            failed.append(ticker)
            print(f"{ticker}: FAILED ({exc})", file=out)
        else:
            print(f"{ticker}: {len(series)} rows", file=out)
    if failed:
        print(f"failed tickers: {', '.join(failed)}", file=out)
        return 1
    return 0


def _run_dir(cfg: RunConfig, i: int) -> Path:
    return Path(cfg.output_dir) / f"run{i}"


def cmd_train(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    ds = load_dataset(cfg)
    env, val_env = _env(ds, cfg, "train"), _env(ds, cfg, "val")
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.toml").write_text(cfg.dumps())
    variant = cfg.train.variant
    curves = {}
    for i in range(cfg.metrics.runs):
        seed = derive_seed(cfg.seed, f"run{i}")
        try:
            result = train(cfg.train, env, seed=seed)
        except TrainingDiverged as exc:
            print(f"training diverged in run {i}: {exc}", file=sys.stderr)
            return 1
        run_dir = _run_dir(cfg, i)
        run_dir.mkdir(parents=True, exist_ok=True)
        result.history.write_csv(run_dir / HISTORY_NAME)
        kind = "pets" if variant.planning else "sac"
        save_checkpoint(run_dir / CHECKPOINT_NAME, kind, ds.universe.tickers, cfg, result.agent, result.model)
        overrides = int(np.nansum(result.history.column("overrides")))
        print(f"run {i}: seed {seed}, {cfg.train.epochs} epochs, {overrides} override activations", file=out)
        actor = result.actor if kind == "sac" else PetsController(
            result.actor.planner, result.model, component_rng(seed, "validate"))
        curves[f"{variant.value}_run{i}"] = evaluate(actor, val_env, variant, seed)
    reports = {name: metrics(c, cfg.metrics.risk_free) for name, c in curves.items()}
    print("validation metrics:", file=out)
    print(render_table(reports), file=out)
    return 0


def _checkpoints(cfg: RunConfig, explicit: Sequence[str] | None) -> list[Path]:
    if explicit:
        paths = [Path(p) for p in explicit]
    else:
        found = Path(cfg.output_dir).glob(f"run*/{CHECKPOINT_NAME}")
        paths = sorted((p for p in found if p.parent.name[3:].isdigit()), key=lambda p: int(p.parent.name[3:]))
    missing = [str(p) for p in paths if not p.exists()]
    if not paths or missing:
        raise DataError(f"checkpoint not found: {missing or cfg.output_dir}")
    return paths


def _baseline(cfg: RunConfig, ds: Dataset, dates: list) -> EquityCurve:
    start, stop = ds.test
    if cfg.data.index_csv:
        index = load_csv(cfg.data.index_csv)
        lookup = dict(zip(index.calendar, index.close[:, 0]))
        missing = [d for d in dates if d not in lookup]
        if missing:
            raise DataError(f"index series lacks {len(missing)} test dates, first {missing[0]}")
        levels = [lookup[d] for d in dates]
    else:
        # equal-weight buy-and-hold of the traded universe
        close = ds.universe.close[start:stop]
        levels = (close / close[0]).mean(axis=1)
    return baseline_curve(levels, dates, cfg.env.initial_balance)


def cmd_backtest(cfg: RunConfig, checkpoints: Sequence[str] | None = None,
                 out=None) -> dict[str, MetricsReport]:
    """Evaluate every checkpoint on the test split; returns the metric rows written to disk."""
    out = out or sys.stdout
    ds = load_dataset(cfg)
    env = _env(ds, cfg, "test")
    curves: dict[str, EquityCurve] = {}
    label = None
    for i, path in enumerate(_checkpoints(cfg, checkpoints)):
        ckpt = load_checkpoint(path)
        if list(ckpt.tickers) != list(ds.universe.tickers):
            raise DataError(f"{path}: trained on {ckpt.tickers}, test split has {list(ds.universe.tickers)}")
        if ckpt.agent is not None and ckpt.agent.obs_dim != env.obs_dim:
            raise DataError(f"{path}: observation size {ckpt.agent.obs_dim} != {env.obs_dim}")
        seed = derive_seed(cfg.seed, f"eval{i}")
        variant = ckpt.config.train.variant
        label = "HOLD" if ckpt.kind == "hold" else variant.value
        actor = ckpt.actor(env.action_dim, component_rng(seed, "cem"))
        curves[f"{label}_seed{i}"] = evaluate(actor, env, variant, seed)
    per_seed = {name: metrics(c, cfg.metrics.risk_free) for name, c in curves.items()}
    dates = list(env.market.dates)
    baseline = _baseline(cfg, ds, dates)
    rows = report({**curves, "baseline": baseline}, Path(cfg.output_dir) / "backtest",
                  cfg.metrics.risk_free, extra_rows={label: mean_report(list(per_seed.values()))})
    print(render_table(rows), file=out)
    return rows


def cmd_report(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    path = Path(cfg.output_dir) / "backtest" / "metrics.json"
    if not path.exists():
        raise DataError(f"{path} not found; run `quant backtest` first")
    data = json.loads(path.read_text())
    rows = {name: MetricsReport(**vals) for name, vals in data.items()}
    text = render_table(rows)
    yearly = path.parent / "yearly.csv"
    if yearly.exists():
        text += "\n\nyearly returns (July to July):\n" + yearly.read_text().rstrip()
    print(text, file=out)
    (Path(cfg.output_dir) / "report.txt").write_text(text + "\n")
    return 0


def cmd_selftest(out=None) -> int:
    out = out or sys.stdout
    results = run_checks()
    print(render_checks(results), file=out)
    return 0 if all(r.passed for r in results) else 1


# --- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quant", description="RSRS-guided model-based trading agents")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("command", choices=("fetch", "train", "backtest", "report", "selftest"))
    parser.add_argument("--config", metavar="FILE", help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--variant", choices=[v.value for v in Variant], help="agent variant")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--checkpoint", action="append", metavar="FILE",
                        help="checkpoint to backtest (repeatable; default: every run in the output dir)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = RunConfig.loads(text)
    else:
        cfg = RunConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.variant is not None:
        d["train"]["variant"] = args.variant
    if args.out is not None:
        d["output_dir"] = args.out
    return RunConfig.from_dict(d)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            return cmd_selftest()
        cfg = resolve_config(args)
        if args.command == "fetch":
            return cmd_fetch(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "backtest":
            cmd_backtest(cfg, args.checkpoint)
            return 0
        return cmd_report(cfg)
    except (DataError, FetchError, ValueError, OSError) as exc:
        print(f"quant {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
