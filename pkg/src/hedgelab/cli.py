"""Command-line pipeline: ingest, forecaster, expert, pretrain, finetune, evaluate, sweep, grid, report.

Every command reads a YAML run configuration (optional; defaults run on the
bundled fixture), applies ``--set dotted.key=value`` overrides and writes its
artifacts to ``<output root>/<run name>/<command>/`` together with the
resolved configuration and the package version.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import typing
import zlib
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, create_model

from . import __version__
from . import agent as ag
from . import evalkit as ek
from . import forecaster as fc
from . import hedgenv as he
from . import marketdata as md
from . import pricing as pr

log = logging.getLogger("hedgelab")

OUTPUT_ENV = "HEDGELAB_OUTPUT"
COMMANDS = (
    "ingest",
    "train-forecaster",
    "sample-paths",
    "build-expert",
    "pretrain",
    "finetune",
    "evaluate",
    "sweep",
    "grid",
    "report",
)


class ConfigError(ValueError):
    """Invalid configuration or override; exit status 2."""


class MissingArtifact(RuntimeError):
    """An upstream command has not been run; exit status 2."""


# ---------------------------------------------------------------------------
# configuration schema


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _section_from(cls, name: str, **extra) -> type[BaseModel]:
    """Pydantic mirror of a module config dataclass, plus CLI-only fields."""
    hints = typing.get_type_hints(cls)
    fields = {}
    for f in dataclasses.fields(cls):
        fields[f.name] = (hints[f.name], f.default)
    fields.update(extra)
    return create_model(name, __base__=Section, **fields)


NetSection = _section_from(ag.NetConfig, "NetSection")
BCSection = _section_from(ag.BCConfig, "BCSection")
TrainSection = _section_from(ag.TrainConfig, "TrainSection")
ForecasterSection = _section_from(
    fc.ForecastConfig,
    "ForecasterSection",
    horizon=(int, 20),
    n_paths=(int, 100),
)


class DataSection(Section):
    ohlc: Optional[str] = None  # default: bundled fixture
    options: Optional[str] = None
    asset: Optional[str] = None  # default: first asset in the panel
    train_end: Optional[str] = None  # ISO dates; default from fractions
    val_end: Optional[str] = None
    train_frac: float = 0.7
    val_frac: float = 0.15
    moneyness_band: tuple[float, float] = (0.95, 1.05)
    max_days: int = 22


class PricingSection(Section):
    r_f: float = 0.0
    expert_source: Literal["chain", "synthetic"] = "chain"
    synthetic_contracts: int = 500
    synthetic_sigma: float = 0.2


class EnvSection(Section):
    source: Literal["gbm", "forecaster", "historical"] = "gbm"
    S0: float = 100.0
    sigma: float = 0.2
    mu: float = 0.0
    steps: int | tuple[int, int] = 20
    moneyness: tuple[float, float] = (0.95, 1.05)
    cost_rate: float = 0.0


class AgentSection(Section):
    init: Literal["pretrain", "random"] = "pretrain"
    updater: Literal["ppo", "a2c"] = "ppo"
    bc_holdout: float = 0.1
    net: NetSection = Field(default_factory=NetSection)
    bc: BCSection = Field(default_factory=BCSection)
    train: TrainSection = Field(default_factory=TrainSection)


class EvalSection(Section):
    strategies: list[Literal["zero", "delta", "agent"]] = ["zero", "delta", "agent"]
    n_episodes: int = 2000
    cost_rates: list[float] = [0.0, 2e-4, 4e-4, 8e-4]
    kde_bins: int = 256
    grid_moneyness: list[float] = list(ek.DEFAULT_MONEYNESS)
    grid_maturity: list[float] = list(ek.DEFAULT_MATURITY)
    episode_log: bool = True


class RunConfig(Section):
    seed: int = 0
    name: str = "default"
    output_dir: str = "runs"
    data: DataSection = Field(default_factory=DataSection)
    forecaster: ForecasterSection = Field(default_factory=ForecasterSection)
    pricing: PricingSection = Field(default_factory=PricingSection)
    env: EnvSection = Field(default_factory=EnvSection)
    agent: AgentSection = Field(default_factory=AgentSection)
    eval: EvalSection = Field(default_factory=EvalSection)


def _set_dotted(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {key}: {p} is not a section")
        node = child
    node[parts[-1]] = value


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        _set_dotted(doc, key.strip(), yaml.safe_load(raw))
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines)) from exc
    # module-level checks live in the dataclasses themselves
    try:
        forecast_config(cfg), ag.NetConfig(**cfg.agent.net.model_dump())
        ag.TrainConfig(**cfg.agent.train.model_dump())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


def forecast_config(cfg: RunConfig) -> fc.ForecastConfig:
    d = cfg.forecaster.model_dump(exclude={"horizon", "n_paths"})
    return fc.ForecastConfig(**d)


# ---------------------------------------------------------------------------
# run context


class Run:
    def __init__(self, cfg: RunConfig, output_root: str | Path | None, workers: int = 1):
        self.cfg = cfg
        root = output_root or os.environ.get(OUTPUT_ENV) or cfg.output_dir
        self.root = Path(root) / cfg.name
        self.workers = workers

    def rng(self, stream: str) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, zlib.crc32(stream.encode())])

    def stage(self, command: str) -> Path:
        d = self.root / command
        d.mkdir(parents=True, exist_ok=True)
        doc = self.cfg.model_dump(mode="json")
        (d / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))
        (d / "VERSION").write_text(f"hedgelab {__version__}\n")
        return d

    def require(self, command: str, *names: str) -> Path:
        d = self.root / command
        for n in names:
            if not (d / n).exists():
                raise MissingArtifact(f"missing {d / n}; run `hedgelab {command}` first")
        return d

    # shared loaders

    def panel(self) -> md.PricePanel:
        return md.ingest_ohlc(self.require("ingest", "ohlc.csv") / "ohlc.csv")

    def eligible(self) -> md.OptionChain:
        return md.ingest_options(self.require("ingest", "options.csv") / "options.csv")

    def asset(self, panel: md.PricePanel) -> str:
        return self.cfg.data.asset or panel.assets[0]

    def episode_factory(self):
        env, r_f = self.cfg.env, self.cfg.pricing.r_f
        if env.source == "historical":
            panel = self.panel()
            pool = he.historical_episodes(self.eligible(), panel, self.asset(panel), env.cost_rate, r_f)

            def make_hist(n: int, rng: np.random.Generator) -> he.EpisodeBatch:
                return pool.subset(rng.choice(len(pool), size=n, replace=n > len(pool)))

            return make_hist
        generator = None
        if env.source == "forecaster":
            model = fc.Forecaster.load(self.require("train-forecaster", "forecaster.ckpt"))
            panel = self.panel()
            generator = fc.path_generator(model, panel, self.asset(panel), env.S0)
        steps = tuple(env.steps) if isinstance(env.steps, (tuple, list)) else env.steps

        def make(n: int, rng: np.random.Generator) -> he.EpisodeBatch:
            return he.make_episodes(
                n, rng, generator=generator, S0=env.S0, sigma=env.sigma, mu=env.mu,
                steps=steps, moneyness=tuple(env.moneyness), cost_rate=env.cost_rate, r_f=r_f, source=env.source,
            )

        return make

    def eval_episodes(self) -> he.EpisodeBatch:
        if self.cfg.env.source == "historical":
            panel = self.panel()
            return he.historical_episodes(self.eligible(), panel, self.asset(panel), self.cfg.env.cost_rate, self.cfg.pricing.r_f)
        return self.episode_factory()(self.cfg.eval.n_episodes, self.rng("eval-episodes"))

    def strategies(self) -> dict:
        out = {}
        for name in self.cfg.eval.strategies:
            if name == "zero":
                out[name] = ek.ZeroAction()
            elif name == "delta":
                out[name] = ek.ImpliedDelta()
            else:
                policy, _ = ag.load_agent(self.require("finetune", "policy.ckpt"))
                out[name] = ek.AgentStrategy(policy)
        return out


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(run: Run) -> None:
    d = run.cfg.data
    fixture = resources.files("hedgelab") / "fixtures"
    ohlc_path = d.ohlc or str(fixture / "ohlc.csv")
    options_path = d.options or str(fixture / "options.csv")
    panel = md.ingest_ohlc(ohlc_path)
    chain = md.ingest_options(options_path)
    skipped: list[str] = []
    eligible = md.filter_eligible_options(chain, panel, band=tuple(d.moneyness_band), max_days=d.max_days, skipped=skipped)
    out = run.stage("ingest")
    md.write_ohlc(panel, out / "ohlc.csv")
    md.write_options(eligible, out / "options.csv")
    (out / "skipped.txt").write_text("".join(s + "\n" for s in skipped))
    summary = {
        "assets": panel.assets,
        "n_dates": panel.n_dates,
        "first_date": str(panel.dates[0]),
        "last_date": str(panel.dates[-1]),
        "option_records": len(chain),
        "eligible_records": len(eligible),
        "skipped_records": len(skipped),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("ingested %d assets x %d dates, %d/%d eligible option records", panel.n_assets, panel.n_dates, len(eligible), len(chain))


def _split_returns(run: Run, panel: md.PricePanel):
    d = run.cfg.data
    dates = panel.dates
    train_end = d.train_end or str(dates[max(1, int(d.train_frac * len(dates))) - 1])
    val_end = d.val_end or str(dates[min(len(dates) - 1, int((d.train_frac + d.val_frac) * len(dates))) - 1])
    returns = md.to_log_returns(panel)
    return md.split_by_date(returns, train_end, val_end)


def cmd_train_forecaster(run: Run) -> None:
    panel = run.panel()
    train, val, test = _split_returns(run, panel)
    model, report = fc.train(train, val, forecast_config(run.cfg), run.rng("forecaster"))
    out = run.stage("train-forecaster")
    model.save(out)
    report.write(out / "train_report.csv")
    scores = {"best_epoch": report.best_epoch}
    held = test if len(test.values) > model.cfg.context_len else val
    if len(held.values) > model.cfg.context_len:
        scores["heldout_nll"] = fc.evaluate_nll(model, held.values)
        scores["constant_gaussian_nll"] = fc.constant_gaussian_nll(train.values, held.values)
    (out / "scores.json").write_text(json.dumps(scores, indent=2) + "\n")
    log.info("forecaster trained, best epoch %d", report.best_epoch)


def cmd_sample_paths(run: Run) -> None:
    model = fc.Forecaster.load(run.require("train-forecaster", "forecaster.ckpt"))
    panel = run.panel()
    f = run.cfg.forecaster
    paths = fc.sample_paths(model, panel, f.horizon, f.n_paths, run.rng("sample-paths"))
    out = run.stage("sample-paths")
    fc.write_paths(out / "paths.csv", paths)
    log.info("sampled %d paths of %d steps", f.n_paths, f.horizon)


def cmd_build_expert(run: Run) -> None:
    p = run.cfg.pricing
    if p.expert_source == "chain":
        panel = run.panel()
        expert = pr.build_expert_dataset(run.eligible(), panel, p.r_f)
    else:
        expert = pr.synthetic_expert_dataset(p.synthetic_contracts, run.rng("expert"), sigma=p.synthetic_sigma, r_f=p.r_f)
    if len(expert) == 0:
        raise RuntimeError("expert dataset is empty")
    out = run.stage("build-expert")
    expert.write(out / "expert.csv")
    (out / "skipped.txt").write_text("".join(s + "\n" for s in expert.skipped))
    log.info("expert dataset: %d pairs, %d skipped", len(expert), len(expert.skipped))


def cmd_pretrain(run: Run) -> None:
    expert = pr.ExpertDataset.read(run.require("build-expert", "expert.csv") / "expert.csv")
    a = run.cfg.agent
    rng = run.rng("pretrain")
    # hold out whole contracts
    contracts = sorted(set(expert.contract_ids))
    n_hold = int(round(a.bc_holdout * len(contracts)))
    held = set(rng.permutation(contracts)[:n_hold].tolist()) if n_hold else set()
    is_held = np.array([c in held for c in expert.contract_ids])
    train_set = expert.subset(np.flatnonzero(~is_held))
    policy = ag.PolicyNet(ag.NetConfig(**a.net.model_dump()), rng)
    res = ag.bc_pretrain(policy, train_set, ag.BCConfig(**a.bc.model_dump()), rng)
    out = run.stage("pretrain")
    ag.save_agent(out, res.policy)
    with open(out / "bc_report.csv", "w") as fh:
        fh.write("epoch,expert_loss,entropy_loss\n")
        for i, (le, lh) in enumerate(zip(res.expert_loss, res.entropy_loss), start=1):
            fh.write(f"{i},{le:.10g},{lh:.10g}\n")
    summary = {"train_pairs": int((~is_held).sum()), "heldout_pairs": int(is_held.sum())}
    if is_held.any():
        # held-out windows must be built on the full set so earlier frames come from the same contract
        windows = expert.windows(policy.cfg.frames)[is_held]
        mu, sigma = res.policy(windows)
        summary["heldout_mae"] = float(np.mean(np.abs(mu - expert.actions[is_held])))
        summary["heldout_sigma_mean"] = float(np.mean(sigma))
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("pretrained on %d pairs", summary["train_pairs"])


def cmd_finetune(run: Run) -> None:
    a = run.cfg.agent
    rng = run.rng("finetune")
    if a.init == "pretrain":
        policy, value = ag.load_agent(run.require("pretrain", "policy.ckpt"))
    else:
        policy, value = ag.PolicyNet(ag.NetConfig(**a.net.model_dump()), rng), None
    res = ag.finetune(run.episode_factory(), policy, value, ag.TrainConfig(**a.train.model_dump()), rng, updater=a.updater, log=log.info)
    if res.aborted:
        raise RuntimeError(f"fine-tuning aborted: {res.aborted}")
    out = run.stage("finetune")
    ag.save_agent(out, res.policy, res.value)
    res.write_report(out / "train_report.csv")
    (out / "summary.json").write_text(json.dumps({"best_epoch": res.best_epoch}, indent=2) + "\n")


def cmd_evaluate(run: Run) -> None:
    episodes = run.eval_episodes()
    strategies = run.strategies()
    rows, results = [], {}
    for name, strat in strategies.items():
        sr = ek.run_strategy(strat, episodes, run.workers)
        results[name] = sr
        rows.append((name, float(np.mean(episodes.cost_rate)), ek.metrics_from_run(sr, episodes)))
    out = run.stage("evaluate")
    ek.write_metrics(out / "metrics.csv", rows)
    for name, _, m in rows:
        ek.pv_distribution(m.pv_samples, run.cfg.eval.kde_bins).write(out / f"pv_distribution_{name}.csv")
        if run.cfg.eval.episode_log:
            he.write_episode_log(out / f"episodes_{name}.csv", episodes, results[name].actions)
    for name, _, m in rows:
        log.info("%s: avg_r=%.6g avg_PV=%.6g std_PV=%.6g (n=%d)", name, m.avg_r, m.avg_pv, m.std_pv, m.n)


def cmd_sweep(run: Run) -> None:
    episodes = run.eval_episodes()
    res = ek.cost_sweep(run.strategies(), run.cfg.eval.cost_rates, episodes, run.workers)
    out = run.stage("sweep")
    res.write(out / "sweep.csv")


def cmd_grid(run: Run) -> None:
    episodes = run.eval_episodes()
    out = run.stage("grid")
    e = run.cfg.eval
    for name, strat in run.strategies().items():
        sr = ek.run_strategy(strat, episodes, run.workers)
        cells = ek.grid_report(sr.pv, episodes, e.grid_moneyness, e.grid_maturity)
        ek.write_grid(out / f"grid_{name}.csv", cells)


def _read_csv(path: Path) -> list[dict]:
    import csv

    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _table(rows: list[dict], cols: list[str]) -> list[str]:
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(str(r[c]) for c in cols) + " |")
    return lines


def _short(x: str) -> str:
    return f"{float(x):.6g}"


def cmd_report(run: Run) -> None:
    ev = run.require("evaluate", "metrics.csv")
    lines = [f"# Run report: {run.cfg.name}", "", f"hedgelab {__version__}, seed {run.cfg.seed}, environment source `{run.cfg.env.source}`.", ""]
    metrics = _read_csv(ev / "metrics.csv")
    cols = ["strategy", "c", "n", "avg_r", "avg_PV", "std_PV", "ci_low", "ci_high"]
    lines += ["## Evaluation", ""]
    lines += _table([{k: (r[k] if k in ("strategy", "n") else _short(r[k])) for k in cols} for r in metrics], cols)
    sweep = run.root / "sweep" / "sweep.csv"
    if sweep.exists():
        rows = _read_csv(sweep)
        lines += ["", "## Cost sweep", ""]
        lines += _table([{k: (r[k] if k in ("strategy", "n") else _short(r[k])) for k in cols} for r in rows], cols)
        by = {(r["strategy"], float(r["c"])): float(r["avg_r"]) for r in rows}
        others = sorted({s for s, _ in by} - {"delta"})
        if ("delta", float(rows[0]["c"])) in by and others:
            lines += ["", "avg_r gap to the implied-Delta rule:", ""]
            gap_rows = []
            for c in sorted({c for _, c in by}):
                g = {"c": f"{c:.6g}"}
                for s in others:
                    g[s] = f"{by[(s, c)] - by[('delta', c)]:.6g}"
                gap_rows.append(g)
            lines += _table(gap_rows, ["c", *others])
    ft = run.root / "finetune" / "train_report.csv"
    if ft.exists():
        rows = _read_csv(ft)
        best = max(rows, key=lambda r: float(r["avg_r"]))
        lines += ["", "## Fine-tuning", "", f"{len(rows) - 1} epochs; best validation avg_r {_short(best['avg_r'])} at epoch {best['epoch']}."]
    grid_dir = run.root / "grid"
    if grid_dir.exists():
        lines += ["", "## Grid files", ""]
        lines += [f"- {p.name}" for p in sorted(grid_dir.glob("grid_*.csv"))]
    out = run.stage("report")
    (out / "report.md").write_text("\n".join(lines) + "\n")


HANDLERS = {
    "ingest": cmd_ingest,
    "train-forecaster": cmd_train_forecaster,
    "sample-paths": cmd_sample_paths,
    "build-expert": cmd_build_expert,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "grid": cmd_grid,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hedgelab", description="Deep hedging pipeline on local market files.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("-c", "--config", help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override, repeatable")
    p.add_argument("-o", "--output", help=f"output root (default: ${OUTPUT_ENV} or output_dir from the config)")
    p.add_argument("-w", "--workers", type=int, default=1, help="episode-level worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, config: str | Path | None = None, overrides: list[str] = (), output: str | Path | None = None, workers: int = 1) -> int:
    """Execute one pipeline command; returns the process exit status."""
    try:
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg = load_config(config, list(overrides))
        HANDLERS[command](Run(cfg, output, workers))
    except (ConfigError, MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to status 1
        log.debug("command failed", exc_info=True)
        print(f"error: {command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    return run(args.command, args.config, args.overrides, args.output, args.workers)


if __name__ == "__main__":
    sys.exit(main())
