"""Hedging metrics, PV distributions, cost sweeps and moneyness x maturity grids."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import PolicyNet, stack_frames
from .hedgenv import BatchHedgeEnv, EpisodeBatch
from .pricing import implied_delta

Z95 = 1.959963984540054
MAX_FAILURE_SHARE = 0.01


class EvaluationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# strategies: act(history [B, t+1, 3], episodes) -> actions [B]


class ZeroAction:
    name = "zero"

    def act(self, history: np.ndarray, episodes: EpisodeBatch) -> np.ndarray:
        return np.zeros(history.shape[0])


class ImpliedDelta:
    """N(d1) at the episode's entry implied vol, from the observed S/K and time to expiry."""

    name = "delta"

    def act(self, history: np.ndarray, episodes: EpisodeBatch) -> np.ndarray:
        obs = history[:, -1]
        tte = obs[:, 1]
        out = np.full(len(obs), np.nan)
        ok = np.isfinite(episodes.sigma) & (tte > 0)
        out[ok] = implied_delta(obs[ok, 0], 1.0, episodes.r_f, episodes.sigma[ok], tte[ok])
        # rows already past expiry are ignored by the environment
        out[tte <= 0] = 0.0
        return out


class AgentStrategy:
    """Plays the policy mean on frame-stacked observations."""

    def __init__(self, policy: PolicyNet, name: str = "agent"):
        self.policy = policy
        self.name = name

    def act(self, history: np.ndarray, episodes: EpisodeBatch) -> np.ndarray:
        mu, _ = self.policy(stack_frames(history, self.policy.cfg.frames))
        return mu


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class HedgeMetrics:
    avg_r: float
    avg_pv: float
    std_pv: float
    n: int
    pv_samples: np.ndarray = field(repr=False)
    failed: list[int] = field(default_factory=list)

    @classmethod
    def from_samples(cls, pv, failed: list[int] | None = None) -> "HedgeMetrics":
        pv = np.asarray(pv, dtype=np.float64)
        if len(pv) < 2:
            raise EvaluationError("need at least two completed episodes")
        return cls(float(np.mean(-(pv**2))), float(np.mean(pv)), float(np.std(pv, ddof=1)), len(pv), pv, failed or [])

    @property
    def ci95(self) -> tuple[float, float]:
        half = Z95 * self.std_pv / math.sqrt(self.n)
        return self.avg_pv - half, self.avg_pv + half


@dataclass
class StrategyRun:
    pv: np.ndarray  # NaN for failed episodes
    actions: np.ndarray  # clipped positions [B, Tmax]
    failed: np.ndarray  # bool [B]


def _run_chunk(strategy, episodes: EpisodeBatch) -> StrategyRun:
    env = BatchHedgeEnv(episodes)
    obs = env.reset()
    B, T = len(episodes), episodes.t_max
    history = np.empty((B, T + 1, 3))
    history[:, 0] = obs
    failed = np.zeros(B, dtype=bool)
    for t in range(T):
        a = np.asarray(strategy.act(history[:, : t + 1], episodes), dtype=np.float64)
        bad = ~np.isfinite(a) & (t < episodes.steps)
        failed |= bad
        obs, _, _ = env.step(np.where(np.isfinite(a), a, 0.0))
        history[:, t + 1] = obs
    pv = np.where(failed, np.nan, env.pv)
    return StrategyRun(pv, env.actions.copy(), failed)


def run_strategy(strategy, episodes: EpisodeBatch, workers: int = 1) -> StrategyRun:
    """Play ``strategy`` on every episode; results do not depend on ``workers``."""
    if workers <= 1 or len(episodes) < 2 * workers:
        return _run_chunk(strategy, episodes)
    chunks = np.array_split(np.arange(len(episodes)), workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_chunk, [strategy] * len(chunks), [episodes.subset(c) for c in chunks]))
    T = episodes.t_max
    actions = np.zeros((len(episodes), T))
    for c, p in zip(chunks, parts):
        actions[c, : p.actions.shape[1]] = p.actions
    return StrategyRun(np.concatenate([p.pv for p in parts]), actions, np.concatenate([p.failed for p in parts]))


def metrics_from_run(run: StrategyRun, episodes: EpisodeBatch) -> HedgeMetrics:
    failed_ids = [int(i) for i in episodes.ids[run.failed]]
    if len(failed_ids) > MAX_FAILURE_SHARE * len(episodes):
        raise EvaluationError(f"{len(failed_ids)} of {len(episodes)} episodes failed (ids {failed_ids[:10]}...); run invalid")
    return HedgeMetrics.from_samples(run.pv[~run.failed], failed_ids)


def evaluate(strategy, episodes: EpisodeBatch, workers: int = 1) -> HedgeMetrics:
    """avg_r = mean(-PV^2), avg_PV, std_PV (n - 1) over completed episodes."""
    if len(episodes) < 2:
        raise EvaluationError("need at least two episodes")
    return metrics_from_run(run_strategy(strategy, episodes, workers), episodes)


# ---------------------------------------------------------------------------
# distributions


@dataclass
class PVDistribution:
    grid_x: np.ndarray
    density: np.ndarray
    hist_count: np.ndarray
    bandwidth: float

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid_x", "density", "hist_count"])
            for x, d, c in zip(self.grid_x, self.density, self.hist_count):
                w.writerow([f"{x:.10g}", f"{d:.10g}", int(c)])


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(x) ** (-0.2)


def pv_distribution(pv, bins: int = 256) -> PVDistribution:
    """Histogram and Gaussian KDE on one evenly spaced grid spanning the data +- 4 bandwidths."""
    pv = np.asarray(pv, dtype=np.float64)
    if len(pv) < 2:
        raise EvaluationError("need at least two samples")
    h = silverman_bandwidth(pv)
    if h <= 0:
        h = 1e-6 * max(1.0, abs(float(pv[0])))
    lo, hi = pv.min() - 4 * h, pv.max() + 4 * h
    edges = np.linspace(lo, hi, bins + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    counts, _ = np.histogram(pv, bins=edges)
    z = (centres[:, None] - pv[None, :]) / h
    density = np.exp(-0.5 * z**2).sum(axis=1) / (len(pv) * h * math.sqrt(2 * math.pi))
    return PVDistribution(centres, density, counts, h)


# ---------------------------------------------------------------------------
# cost sweeps


@dataclass
class SweepRow:
    strategy: str
    c: float
    metrics: HedgeMetrics


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def get(self, strategy: str, c: float) -> HedgeMetrics:
        for r in self.rows:
            if r.strategy == strategy and r.c == c:
                return r.metrics
        raise KeyError((strategy, c))

    def write(self, path: str | Path) -> None:
        write_metrics(path, [(r.strategy, r.c, r.metrics) for r in self.rows])


def write_metrics(path: str | Path, rows) -> None:
    """Metrics file: strategy, c, n, avg_r, avg_PV, std_PV, ci_low, ci_high."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "c", "n", "avg_r", "avg_PV", "std_PV", "ci_low", "ci_high"])
        for name, c, m in rows:
            lo, hi = m.ci95
            w.writerow([name, repr(float(c)), m.n, repr(m.avg_r), repr(m.avg_pv), repr(m.std_pv), repr(lo), repr(hi)])


def cost_sweep(strategies: dict, c_values, episodes: EpisodeBatch, workers: int = 1) -> SweepResult:
    """Every strategy at every cost rate on the same underlying paths."""
    c_values = [float(c) for c in c_values]
    if any(b <= a for a, b in zip(c_values, c_values[1:])):
        raise ValueError("cost rates must be strictly increasing")
    rows = []
    for c in c_values:
        eps = episodes.with_cost(c)
        for name, strat in strategies.items():
            rows.append(SweepRow(name, c, evaluate(strat, eps, workers)))
    return SweepResult(rows)


# ---------------------------------------------------------------------------
# moneyness x maturity grid

DEFAULT_MONEYNESS = tuple(np.round(np.arange(0.95, 1.0501, 0.02), 10))
DEFAULT_MATURITY = (1, 4, 7, 10, 13, 16, 19, 22)


@dataclass
class GridCell:
    moneyness: tuple[float, float]
    tte: tuple[float, float]
    n: int
    mean_pv: float | None
    p05: float | None
    p50: float | None
    p95: float | None
    loss_prob: float | None


def _bucket(x: np.ndarray, edges) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.float64)
    idx = np.searchsorted(edges, x, side="right") - 1
    idx = np.where(x == edges[-1], len(edges) - 2, idx)
    return np.where((x >= edges[0]) & (x <= edges[-1]), idx, -1)


def grid_report(pv, episodes: EpisodeBatch, moneyness_edges=DEFAULT_MONEYNESS, maturity_edges=DEFAULT_MATURITY) -> list[GridCell]:
    """PV_T statistics bucketed by entry S/K and days to expiry; out-of-range episodes go to the nearest edge bucket."""
    pv = np.asarray(pv, dtype=np.float64)
    m_edges = np.asarray(moneyness_edges, dtype=np.float64)
    t_edges = np.asarray(maturity_edges, dtype=np.float64)
    m = np.clip(episodes.entry_moneyness, m_edges[0], m_edges[-1])
    t = np.clip(episodes.steps.astype(np.float64), t_edges[0], t_edges[-1])
    mb, tb = _bucket(m, m_edges), _bucket(t, t_edges)
    cells = []
    for i in range(len(m_edges) - 1):
        for j in range(len(t_edges) - 1):
            sel = (mb == i) & (tb == j) & np.isfinite(pv)
            x = pv[sel]
            if len(x) == 0:
                cells.append(GridCell((m_edges[i], m_edges[i + 1]), (t_edges[j], t_edges[j + 1]), 0, None, None, None, None, None))
                continue
            p05, p50, p95 = np.percentile(x, [5, 50, 95])
            cells.append(GridCell((m_edges[i], m_edges[i + 1]), (t_edges[j], t_edges[j + 1]), len(x), float(x.mean()), float(p05), float(p50), float(p95), float(np.mean(x < 0))))
    return cells


def write_grid(path: str | Path, cells: list[GridCell]) -> None:
    def fmt(v):
        return "NA" if v is None else f"{v:.10g}"

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["moneyness_lo", "moneyness_hi", "tte_lo", "tte_hi", "n", "mean_pv", "p05", "p50", "p95"])
        for c in cells:
            w.writerow([fmt(c.moneyness[0]), fmt(c.moneyness[1]), fmt(c.tte[0]), fmt(c.tte[1]), c.n, fmt(c.mean_pv), fmt(c.p05), fmt(c.p50), fmt(c.p95)])
