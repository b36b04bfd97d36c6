"""Black-Scholes pricing, implied volatility, Monte-Carlo pricing, expert data."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .marketdata import OptionChain, PricePanel, trading_days_between

log = logging.getLogger(__name__)

TRADING_DAYS = 252
IV_BRACKET = (1e-4, 5.0)
IV_BISECTIONS = 60
IV_NEWTON_STEPS = 8
IV_PRICE_TOL = 1e-8


class ArbitrageError(ValueError):
    """Option price outside the no-arbitrage band."""


class ImpliedVolRangeError(ValueError):
    """No implied volatility inside the search bracket."""


def norm_cdf(x):
    return ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class BSInputs:
    S0: float
    K: float
    r_f: float
    sigma: float
    T: float

    def __post_init__(self) -> None:
        if not (self.S0 > 0 and self.K > 0 and self.sigma > 0 and self.T > 0):
            raise ValueError("S0, K, sigma and T must be positive")
        if self.T > 5:
            raise ValueError("time to expiry above 5 years")

    def call_price(self) -> float:
        return float(bs_call_price(self.S0, self.K, self.r_f, self.sigma, self.T))

    def delta(self) -> float:
        return float(implied_delta(self.S0, self.K, self.r_f, self.sigma, self.T))


def _d1(S0, K, r_f, sigma, T):
    vol = sigma * np.sqrt(T)
    return (np.log(S0 / K) + (r_f + 0.5 * sigma * sigma) * T) / vol


def bs_call_price(S0, K, r_f, sigma, T):
    """European call price; vectorised. sigma == 0 or T == 0 give the forward intrinsic value."""
    S0, K, r_f, sigma, T = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (S0, K, r_f, sigma, T)))
    disc_k = K * np.exp(-r_f * T)
    degenerate = (sigma * np.sqrt(T)) <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = _d1(S0, K, r_f, sigma, T)
        d2 = d1 - sigma * np.sqrt(T)
        price = S0 * norm_cdf(d1) - disc_k * norm_cdf(d2)
    price = np.where(degenerate, np.maximum(S0 - disc_k, 0.0), price)
    price = np.clip(price, np.maximum(S0 - disc_k, 0.0), S0)
    return price[()] if price.ndim == 0 else price


def bs_vega(S0, K, r_f, sigma, T):
    return S0 * norm_pdf(_d1(S0, K, r_f, sigma, T)) * np.sqrt(T)


def implied_delta(S0, K, r_f, sigma_market, T):
    """N(d1) at the implied volatility."""
    out = norm_cdf(_d1(np.asarray(S0, dtype=np.float64), K, r_f, sigma_market, T))
    return out[()] if np.ndim(out) == 0 else out


def implied_vol_array(c_market, S0, K, r_f, T) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised inversion. Returns (sigma, status) with status 0 ok, 1 arbitrage, 2 range."""
    c, S0, K, r_f, T = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (c_market, S0, K, r_f, T)))
    c = c.astype(np.float64).copy()
    lower = np.maximum(S0 - K * np.exp(-r_f * T), 0.0)
    status = np.zeros(c.shape, dtype=np.int8)
    status[~((c > lower) & (c < S0))] = 1
    lo = np.full(c.shape, IV_BRACKET[0])
    hi = np.full(c.shape, IV_BRACKET[1])
    p_lo = bs_call_price(S0, K, r_f, lo, T)
    p_hi = bs_call_price(S0, K, r_f, hi, T)
    status[(status == 0) & ((c < p_lo) | (c > p_hi))] = 2
    for _ in range(IV_BISECTIONS):
        mid = 0.5 * (lo + hi)
        above = bs_call_price(S0, K, r_f, mid, T) > c
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    sigma = 0.5 * (lo + hi)
    for _ in range(IV_NEWTON_STEPS):
        err = bs_call_price(S0, K, r_f, sigma, T) - c
        if np.all(np.abs(err[status == 0]) < IV_PRICE_TOL * 1e-3):
            break
        vega = bs_vega(S0, K, r_f, sigma, T)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(vega > 1e-12, err / vega, 0.0)
        sigma = np.clip(sigma - step, lo, hi)
    sigma = np.where(status == 0, sigma, np.nan)
    return sigma, status


def implied_vol(c_market: float, S0: float, K: float, r_f: float, T: float) -> float:
    """Volatility reproducing ``c_market`` to within 1e-8 price units."""
    sigma, status = implied_vol_array(c_market, S0, K, r_f, T)
    if status == 1:
        lower = max(S0 - K * math.exp(-r_f * T), 0.0)
        raise ArbitrageError(f"price {c_market} outside no-arbitrage bounds ({lower}, {S0})")
    if status == 2:
        raise ImpliedVolRangeError(f"no implied volatility in {IV_BRACKET} for price {c_market}")
    return float(sigma)


def gbm_paths(S0: float, mu: float, sigma: float, dt: float, steps: int, n_paths: int, rng: np.random.Generator) -> np.ndarray:
    """Exact GBM scheme; returns an array [n_paths, steps + 1] starting at S0."""
    if sigma < 0 or dt <= 0:
        raise ValueError("need sigma >= 0 and dt > 0")
    z = rng.standard_normal((n_paths, steps))
    incr = (mu - 0.5 * sigma * sigma) * dt + sigma * math.sqrt(dt) * z
    logs = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(incr, axis=1)], axis=1)
    return S0 * np.exp(logs)


@dataclass
class MCPrice:
    price: float
    stderr: float
    n_paths: int


PathSource = Callable[[int, np.random.Generator], np.ndarray]


def mc_risk_neutral_price(
    generator: PathSource,
    S0: float,
    K: float,
    r_f: float,
    T: float,
    n_paths: int,
    rng: np.random.Generator,
) -> MCPrice:
    """Discounted mean call payoff after replacing the generator's drift.

    The pooled per-step mean log return of the sampled paths is swapped for
    ``(r_f - realized_var / 2) * dt``, with ``realized_var`` the pooled
    annualised variance of per-step log returns. Paths are rescaled to start
    at ``S0``.
    """
    if n_paths < 100:
        raise ValueError("need at least 100 paths for a meaningful standard error")
    paths = np.asarray(generator(n_paths, rng), dtype=np.float64)
    if paths.ndim != 2 or paths.shape[0] != n_paths or paths.shape[1] < 2 or np.any(paths <= 0):
        raise ValueError("generator must return positive paths of shape [n_paths, steps + 1]")
    steps = paths.shape[1] - 1
    dt = T / steps
    x = np.diff(np.log(paths), axis=1)
    realized_var = x.var(ddof=1) / dt
    x = x - x.mean() + (r_f - 0.5 * realized_var) * dt
    s_T = S0 * np.exp(x.sum(axis=1))
    disc = math.exp(-r_f * T)
    payoff = disc * np.maximum(s_T - K, 0.0)
    return MCPrice(float(payoff.mean()), float(payoff.std(ddof=1) / math.sqrt(n_paths)), n_paths)


# ---------------------------------------------------------------------------
# expert dataset


@dataclass
class ExpertDataset:
    """Expert (state, action) pairs; states are (S/K, tte_years, prev_action)."""

    contract_ids: list[str]
    dates: np.ndarray  # datetime64[D] or day index
    states: np.ndarray  # [N, 3]
    actions: np.ndarray  # [N]
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, idx) -> "ExpertDataset":
        idx = np.asarray(idx)
        return ExpertDataset([self.contract_ids[i] for i in idx], self.dates[idx], self.states[idx], self.actions[idx])

    def windows(self, m: int) -> np.ndarray:
        """Frame-stacked states [N, m, 3]: earlier pairs of the same contract, padded by repetition."""
        out = np.empty((len(self), m, 3))
        start = 0
        ids = self.contract_ids
        for i in range(len(self)):
            if i == 0 or ids[i] != ids[i - 1]:
                start = i
            lo = i - m + 1
            src = np.maximum(np.arange(lo, i + 1), start)
            out[i] = self.states[src]
        return out

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["contract_id", "date", "S_over_K", "tte_years", "prev_action", "action"])
            for cid, d, s, a in zip(self.contract_ids, self.dates, self.states, self.actions):
                w.writerow([cid, str(d), repr(float(s[0])), repr(float(s[1])), repr(float(s[2])), repr(float(a))])

    @classmethod
    def read(cls, path: str | Path) -> "ExpertDataset":
        ids, dates, states, actions = [], [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                ids.append(row["contract_id"])
                dates.append(row["date"])
                states.append([float(row["S_over_K"]), float(row["tte_years"]), float(row["prev_action"])])
                actions.append(float(row["action"]))
        return cls(ids, np.array(dates), np.array(states).reshape(-1, 3), np.array(actions))


def build_expert_dataset(chain: OptionChain, underlying: PricePanel, r_f: float = 0.0) -> ExpertDataset:
    """Implied-Delta expert actions for every contract day in ``chain``.

    Records are grouped by contract and walked in date order; the first day
    of each contract sees a previous action of 0. Days whose implied
    volatility cannot be inverted are skipped and listed in ``skipped``.
    """
    by_contract: dict[str, list] = defaultdict(list)
    for rec in chain:
        by_contract[rec.contract_id].append(rec)

    ids, dates, states, actions, skipped = [], [], [], [], []
    for cid in sorted(by_contract):
        recs = sorted(by_contract[cid], key=lambda r: r.trade_date)
        prev = 0.0
        for rec in recs:
            try:
                i = underlying.asset_index(rec.underlying)
                t = underlying.date_index(rec.trade_date)
            except (ValueError, KeyError):
                skipped.append(f"{cid} {rec.trade_date}: no underlying price")
                continue
            s_t = underlying.close[i, t]
            days = trading_days_between(underlying.dates, rec.trade_date, rec.expiry_date)
            if math.isnan(s_t) or days <= 0:
                skipped.append(f"{cid} {rec.trade_date}: no underlying price or expired")
                continue
            tte = days / TRADING_DAYS
            try:
                sigma = implied_vol(rec.close, s_t, rec.strike, r_f, tte)
            except (ArbitrageError, ImpliedVolRangeError) as exc:
                skipped.append(f"{cid} {rec.trade_date}: {exc}")
                continue
            delta = float(implied_delta(s_t, rec.strike, r_f, sigma, tte))
            ids.append(cid)
            dates.append(np.datetime64(rec.trade_date, "D"))
            states.append((s_t / rec.strike, tte, prev))
            actions.append(delta)
            prev = delta
    if skipped:
        log.info("expert dataset: %d records skipped", len(skipped))
    return ExpertDataset(
        ids,
        np.array(dates, dtype="datetime64[D]"),
        np.array(states, dtype=np.float64).reshape(-1, 3),
        np.array(actions, dtype=np.float64),
        skipped,
    )


def synthetic_expert_dataset(
    n_contracts: int,
    rng: np.random.Generator,
    *,
    sigma: float = 0.2,
    r_f: float = 0.0,
    S0: float = 100.0,
    max_days: int = 22,
    band: tuple[float, float] = (0.95, 1.05),
) -> ExpertDataset:
    """Expert pairs from GBM underlyings with Black-Scholes prices at ``sigma``.

    Each contract draws entry moneyness uniformly in ``band`` and a maturity
    of 1..``max_days`` trading days; every day until expiry is priced, the
    price inverted to an implied volatility, and N(d1) recorded.
    """
    ids, dates, states, actions = [], [], [], []
    dt = 1.0 / TRADING_DAYS
    for c in range(n_contracts):
        days = int(rng.integers(1, max_days + 1))
        K = S0 / rng.uniform(*band)
        path = gbm_paths(S0, r_f, sigma, dt, days, 1, rng)[0]
        tte = (days - np.arange(days)) / TRADING_DAYS
        prices = bs_call_price(path[:-1], K, r_f, sigma, tte)
        vols, status = implied_vol_array(prices, path[:-1], K, r_f, tte)
        prev = 0.0
        for t in range(days):
            if status[t] != 0:
                continue
            a = float(implied_delta(path[t], K, r_f, vols[t], tte[t]))
            ids.append(f"SYN{c:05d}")
            dates.append(t)
            states.append((path[t] / K, tte[t], prev))
            actions.append(a)
            prev = a
    return ExpertDataset(ids, np.array(dates), np.array(states).reshape(-1, 3), np.array(actions))
