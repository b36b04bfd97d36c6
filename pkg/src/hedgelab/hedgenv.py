"""Hedging MDP for one short European call.

The agent receives the option premium V0 at t=0, holds a long position
a_t in [0, 1] of the underlying over each step, pays proportional costs
c * S_t * |a_{t-1} - a_t| (with a_{-1} = 0 and a forced liquidation to 0 at
expiry), and is rewarded only at the terminal step with -PV_T**2.
Cash earns no interest; PV is measured in index points.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .pricing import TRADING_DAYS, bs_call_price, implied_vol_array

SOURCES = ("gbm", "forecaster", "historical")

# (n_paths, steps, rng) -> positive price paths [n_paths, steps + 1] starting at S0
PathGenerator = Callable[[int, int, np.random.Generator], np.ndarray]


def payoff(S_T, K):
    """Settlement value of the short call, -max(S_T - K, 0)."""
    return -np.maximum(np.asarray(S_T, dtype=np.float64) - K, 0.0)


@dataclass
class EpisodeSpec:
    K: float
    V0: float
    steps: int
    cost_rate: float = 0.0
    source: str = "gbm"
    path: np.ndarray | None = None
    generator: Callable[[int, np.random.Generator], np.ndarray] | None = None
    episode_id: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("episode needs at least one step")
        if self.V0 < 0 or self.K <= 0 or self.cost_rate < 0:
            raise ValueError("need V0 >= 0, K > 0, cost_rate >= 0")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.path is None and self.generator is None:
            raise ValueError("episode needs a fixed path or a generator")


@dataclass
class EnvState:
    S: np.ndarray  # path S_0..S_T
    K: float
    V0: float
    steps: int
    cost_rate: float
    t: int = 0
    prev_action: float = 0.0
    cum_trade_pnl: float = 0.0
    cum_cost: float = 0.0
    done: bool = False
    actions: list[float] = field(default_factory=list)

    @property
    def tte_years(self) -> float:
        return (self.steps - self.t) / TRADING_DAYS

    @property
    def observation(self) -> np.ndarray:
        return np.array([self.S[self.t] / self.K, self.tte_years, self.prev_action])


@dataclass
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray
    done: bool
    cost: float
    pnl: float
    pv: float | None = None


class HedgeEnv:
    """Single-episode environment with explicit step-by-step accounting."""

    def __init__(self) -> None:
        self.state: EnvState | None = None

    def reset(self, spec: EpisodeSpec, rng: np.random.Generator | None = None) -> EnvState:
        if spec.path is not None:
            path = np.asarray(spec.path, dtype=np.float64)
            if len(path) < spec.steps + 1:
                raise ValueError(f"path has {len(path) - 1} steps, episode needs {spec.steps}")
            path = path[: spec.steps + 1]
        else:
            path = np.asarray(spec.generator(spec.steps, rng), dtype=np.float64)
        if np.any(path <= 0):
            raise ValueError("price path must be positive")
        self.state = EnvState(path, spec.K, spec.V0, spec.steps, spec.cost_rate)
        return self.state

    def step(self, action: float) -> Transition:
        st = self.state
        if st is None or st.done:
            raise RuntimeError("episode finished or not started; call reset()")
        if math.isnan(action):
            raise ValueError("action is NaN")
        a = min(max(float(action), 0.0), 1.0)
        obs = st.observation
        s_now, s_next = st.S[st.t], st.S[st.t + 1]
        cost = st.cost_rate * s_now * abs(st.prev_action - a)
        pnl = a * (s_next - s_now)
        st.cum_cost += cost
        st.cum_trade_pnl += pnl
        st.actions.append(a)
        st.prev_action = a
        st.t += 1
        reward, pv = 0.0, None
        if st.t == st.steps:
            liquidation = st.cost_rate * s_next * abs(a)
            st.cum_cost += liquidation
            cost += liquidation
            pv = float(payoff(s_next, st.K)) + st.V0 + st.cum_trade_pnl - st.cum_cost
            reward = -pv * pv
            st.done = True
        return Transition(obs, a, reward, st.observation, st.done, cost, pnl, pv)


@dataclass
class PVBreakdown:
    pv: float
    payoff: float
    trade_pnl: float
    cost: float


def terminal_pv(path, actions, K: float, V0: float, cost_rate: float) -> PVBreakdown:
    """Closed-form PV_T = V_T + V0 + sum a_t dS_t - sum c S_t |a_{t-1} - a_t| with a_{-1} = a_T = 0."""
    S = np.asarray(path, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    if len(S) != len(a) + 1:
        raise ValueError("incomplete episode: need one action per step")
    positions = np.concatenate([[0.0], a, [0.0]])
    trade = float(np.dot(a, np.diff(S)))
    cost = float(cost_rate * np.dot(S, np.abs(np.diff(positions))))
    v_T = float(payoff(S[-1], K))
    return PVBreakdown(v_T + V0 + trade - cost, v_T, trade, cost)


# ---------------------------------------------------------------------------
# batched episodes


@dataclass
class EpisodeBatch:
    """A fixed set of episodes with pre-drawn paths, padded to the longest."""

    paths: np.ndarray  # [B, Tmax + 1]; entries past steps[b] repeat S_T
    K: np.ndarray
    V0: np.ndarray
    steps: np.ndarray  # int [B]
    cost_rate: float | np.ndarray = 0.0
    sigma: np.ndarray | None = None  # entry implied vol used by the Delta rule
    source: str = "gbm"
    r_f: float = 0.0
    ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.paths = np.asarray(self.paths, dtype=np.float64)
        B = self.paths.shape[0]
        self.K = np.broadcast_to(np.asarray(self.K, dtype=np.float64), (B,)).copy()
        self.V0 = np.broadcast_to(np.asarray(self.V0, dtype=np.float64), (B,)).copy()
        self.steps = np.broadcast_to(np.asarray(self.steps, dtype=np.int64), (B,)).copy()
        if np.any(self.steps < 1) or np.any(self.steps > self.paths.shape[1] - 1):
            raise ValueError("steps must be in [1, path length - 1]")
        if np.any(self.paths <= 0):
            raise ValueError("price paths must be positive")
        if self.ids is None:
            self.ids = np.arange(B)
        if self.sigma is None:
            tte = self.steps / TRADING_DAYS
            sig, status = implied_vol_array(self.V0, self.paths[:, 0], self.K, self.r_f, tte)
            self.sigma = np.where(status == 0, sig, np.nan)

    def __len__(self) -> int:
        return self.paths.shape[0]

    @property
    def t_max(self) -> int:
        return int(self.steps.max())

    def with_cost(self, cost_rate: float) -> "EpisodeBatch":
        return EpisodeBatch(self.paths, self.K, self.V0, self.steps, cost_rate, self.sigma, self.source, self.r_f, self.ids)

    def subset(self, idx) -> "EpisodeBatch":
        idx = np.asarray(idx)
        c = self.cost_rate if np.ndim(self.cost_rate) == 0 else np.asarray(self.cost_rate)[idx]
        return EpisodeBatch(self.paths[idx], self.K[idx], self.V0[idx], self.steps[idx], c, self.sigma[idx], self.source, self.r_f, self.ids[idx])

    def spec(self, i: int) -> EpisodeSpec:
        c = float(self.cost_rate if np.ndim(self.cost_rate) == 0 else np.asarray(self.cost_rate)[i])
        return EpisodeSpec(float(self.K[i]), float(self.V0[i]), int(self.steps[i]), c, self.source, self.paths[i, : self.steps[i] + 1], episode_id=int(self.ids[i]))

    @property
    def entry_moneyness(self) -> np.ndarray:
        return self.paths[:, 0] / self.K


class BatchHedgeEnv:
    """Vectorised twin of :class:`HedgeEnv` over an :class:`EpisodeBatch`.

    Episodes shorter than the batch horizon finish early; afterwards their
    rows stay frozen and emit zero reward.
    """

    def __init__(self, episodes: EpisodeBatch) -> None:
        self.ep = episodes
        self.reset()

    @property
    def lengths(self) -> np.ndarray:
        return self.ep.steps

    @property
    def ids(self) -> np.ndarray:
        return self.ep.ids

    def reset(self) -> np.ndarray:
        B = len(self.ep)
        self.t = 0
        self.prev = np.zeros(B)
        self.cum_pnl = np.zeros(B)
        self.cum_cost = np.zeros(B)
        self.done = np.zeros(B, dtype=bool)
        self.pv = np.full(B, np.nan)
        self.actions = np.zeros((B, self.ep.t_max))
        return self.observation()

    def observation(self) -> np.ndarray:
        t = min(self.t, self.ep.paths.shape[1] - 1)
        tte = np.maximum(self.ep.steps - self.t, 0) / TRADING_DAYS
        return np.stack([self.ep.paths[:, t] / self.ep.K, tte, self.prev], axis=1)

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Advance every live episode; returns (next_obs, rewards, done_now)."""
        actions = np.asarray(actions, dtype=np.float64)
        if np.any(np.isnan(actions)):
            raise ValueError(f"NaN action for episodes {self.ep.ids[np.isnan(actions)].tolist()}")
        if self.t >= self.ep.t_max:
            raise RuntimeError("all episodes finished")
        live = ~self.done
        a = np.where(live, np.clip(actions, 0.0, 1.0), self.prev)
        c = self.ep.cost_rate
        s_now = self.ep.paths[:, self.t]
        s_next = self.ep.paths[:, self.t + 1]
        self.cum_cost = self.cum_cost + np.where(live, c * s_now * np.abs(self.prev - a), 0.0)
        self.cum_pnl = self.cum_pnl + np.where(live, a * (s_next - s_now), 0.0)
        self.actions[:, self.t] = np.where(live, a, 0.0)
        self.prev = a
        self.t += 1
        finishing = live & (self.ep.steps == self.t)
        self.cum_cost = self.cum_cost + np.where(finishing, c * s_next * np.abs(a), 0.0)
        pv = payoff(s_next, self.ep.K) + self.ep.V0 + self.cum_pnl - self.cum_cost
        self.pv = np.where(finishing, pv, self.pv)
        rewards = np.where(finishing, -pv * pv, 0.0)
        self.done = self.done | finishing
        return self.observation(), rewards, finishing


# ---------------------------------------------------------------------------
# episode factories


def gbm_generator(S0: float, mu: float, sigma: float) -> PathGenerator:
    from .pricing import gbm_paths

    def gen(n: int, steps: int, rng: np.random.Generator) -> np.ndarray:
        return gbm_paths(S0, mu, sigma, 1.0 / TRADING_DAYS, steps, n, rng)

    return gen


def make_episodes(
    n: int,
    rng: np.random.Generator,
    *,
    generator: PathGenerator | None = None,
    S0: float = 100.0,
    sigma: float = 0.2,
    mu: float = 0.0,
    implied_sigma: float | None = None,
    steps: int | tuple[int, int] = 20,
    moneyness: tuple[float, float] = (0.95, 1.05),
    cost_rate: float = 0.0,
    r_f: float = 0.0,
    source: str = "gbm",
) -> EpisodeBatch:
    """Draw ``n`` short-call episodes; V0 is the Black-Scholes price at ``implied_sigma``.

    ``steps`` is a fixed maturity in trading days or an inclusive (lo, hi)
    range sampled uniformly per episode.
    """
    gen = generator or gbm_generator(S0, mu, sigma)
    implied = sigma if implied_sigma is None else implied_sigma
    if isinstance(steps, (tuple, list)):
        lens = rng.integers(steps[0], steps[1] + 1, size=n)
    else:
        lens = np.full(n, int(steps))
    m = rng.uniform(moneyness[0], moneyness[1], size=n)
    K = S0 / m
    t_max = int(lens.max())
    paths = np.asarray(gen(n, t_max, rng), dtype=np.float64)
    for b in range(n):
        paths[b, lens[b] + 1:] = paths[b, lens[b]]
    V0 = bs_call_price(paths[:, 0], K, r_f, implied, lens / TRADING_DAYS)
    return EpisodeBatch(paths, K, V0, lens, cost_rate, np.full(n, implied), source, r_f)


def historical_episodes(chain, panel, asset: str | None = None, cost_rate: float = 0.0, r_f: float = 0.0) -> EpisodeBatch:
    """Episodes replaying underlying closes from each entry record to expiry.

    V0 is the recorded option close at entry; records whose path has a gap
    are dropped.
    """
    from .marketdata import trading_days_between

    rows = []
    for rec in chain:
        if asset is not None and rec.underlying != asset:
            continue
        i = panel.asset_index(rec.underlying)
        t0 = panel.date_index(rec.trade_date)
        days = trading_days_between(panel.dates, rec.trade_date, rec.expiry_date)
        if days < 1 or t0 + days >= panel.n_dates:
            continue
        path = panel.close[i, t0:t0 + days + 1]
        if np.any(np.isnan(path)):
            continue
        rows.append((path, rec.strike, rec.close, days))
    if not rows:
        raise ValueError("no replayable option records")
    t_max = max(r[3] for r in rows)
    paths = np.empty((len(rows), t_max + 1))
    for b, (path, *_rest) in enumerate(rows):
        paths[b, : len(path)] = path
        paths[b, len(path):] = path[-1]
    return EpisodeBatch(
        paths,
        [r[1] for r in rows],
        [r[2] for r in rows],
        [r[3] for r in rows],
        cost_rate,
        source="historical",
        r_f=r_f,
    )


def write_episode_log(path: str | Path, episodes: EpisodeBatch, actions: np.ndarray) -> None:
    """Audit log with one row per (episode, step): id, t, S_t, action, cost, pnl, reward."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode_id", "t", "S_t", "action", "cost", "pnl", "reward"])
        for b in range(len(episodes)):
            env = HedgeEnv()
            env.reset(episodes.spec(b))
            for t in range(int(episodes.steps[b])):
                tr = env.step(float(actions[b, t]))
                S_t = episodes.paths[b, t]
                w.writerow([int(episodes.ids[b]), t, repr(float(S_t)), repr(float(tr.action)), repr(float(tr.cost)), repr(float(tr.pnl)), repr(float(tr.reward))])
