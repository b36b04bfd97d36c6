"""Synthetic GBM market fixtures: OHLC panels and Black-Scholes priced chains."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .marketdata import OptionChain, OptionRecord, PricePanel, write_ohlc, write_options
from .pricing import TRADING_DAYS, bs_call_price


def business_calendar(start: str, n: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward")


def gbm_ohlc_panel(
    n_dates: int,
    sigmas,
    rng: np.random.Generator,
    *,
    mu: float = 0.0,
    s0: float = 100.0,
    start: str = "2020-01-02",
    intraday_steps: int = 16,
    gap_fraction: float = 0.2,
    market_values=None,
) -> PricePanel:
    """Daily OHLC bars whose closes follow exact GBM with annualised vol ``sigmas``.

    Each day's variance is split into an overnight gap (``gap_fraction``) that
    sets the open, and an intraday random walk whose extremes give high/low.
    """
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=np.float64))
    n = len(sigmas)
    dt = 1.0 / TRADING_DAYS
    o = np.empty((n, n_dates))
    h = np.empty((n, n_dates))
    l = np.empty((n, n_dates))
    c = np.empty((n, n_dates))
    c[:, 0] = s0
    o[:, 0] = h[:, 0] = l[:, 0] = s0
    drift = (mu - 0.5 * sigmas**2) * dt
    for t in range(1, n_dates):
        var = sigmas**2 * dt
        gap = drift * gap_fraction + np.sqrt(var * gap_fraction) * rng.standard_normal(n)
        step_sd = np.sqrt(var * (1 - gap_fraction) / intraday_steps)
        walk = np.cumsum(
            drift[:, None] * (1 - gap_fraction) / intraday_steps + step_sd[:, None] * rng.standard_normal((n, intraday_steps)),
            axis=1,
        )
        intraday = c[:, t - 1, None] * np.exp(gap[:, None] + np.concatenate([np.zeros((n, 1)), walk], axis=1))
        o[:, t] = intraday[:, 0]
        c[:, t] = intraday[:, -1]
        h[:, t] = intraday.max(axis=1)
        l[:, t] = intraday.min(axis=1)
    mv = np.asarray(market_values, dtype=float) if market_values is not None else np.linspace(1.0, 2.0, n) * 1e3
    return PricePanel([f"A{i:02d}" for i in range(n)], business_calendar(start, n_dates), o, h, l, c, mv)


def bs_option_chain(
    panel: PricePanel,
    asset: str,
    rng: np.random.Generator,
    *,
    sigma: float = 0.2,
    r_f: float = 0.0,
    cycle: int = 22,
    strike_step: float = 1.0,
    strikes_each_side: int = 4,
    zero_volume_share: float = 0.05,
) -> OptionChain:
    """Monthly-cycle call chain priced by Black-Scholes at a flat volatility.

    A new expiry is listed every ``cycle`` trading days with strikes around
    the listing-day close; each contract trades daily until the day before
    expiry.
    """
    i = panel.asset_index(asset)
    dates = [d.astype(object) for d in panel.dates]
    records: list[OptionRecord] = []
    for list_t in range(0, panel.n_dates - cycle, cycle):
        exp_t = list_t + cycle
        centre = round(panel.close[i, list_t] / strike_step) * strike_step
        strikes = centre + strike_step * np.arange(-strikes_each_side, strikes_each_side + 1)
        for K in strikes:
            for t in range(list_t, exp_t):
                tte = (exp_t - t) / TRADING_DAYS
                price = float(bs_call_price(panel.close[i, t], K, r_f, sigma, tte))
                volume = 0.0 if rng.uniform() < zero_volume_share else float(rng.integers(1, 500))
                records.append(OptionRecord(dates[t], dates[exp_t], float(K), price, volume, asset))
    return OptionChain(records)


def write_fixture(directory: str | Path, *, seed: int = 0, n_dates: int = 300, sigmas=(0.2, 0.3)) -> dict[str, Path]:
    """Write the bundled two-asset fixture (OHLC + option chain) into ``directory``."""
    rng = np.random.default_rng(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    panel = gbm_ohlc_panel(n_dates, sigmas, rng)
    chain = bs_option_chain(panel, panel.assets[0], rng, sigma=float(sigmas[0]))
    paths = {"ohlc": directory / "ohlc.csv", "options": directory / "options.csv"}
    write_ohlc(panel, paths["ohlc"])
    write_options(chain, paths["options"])
    return paths


def daily_sigma(annual: float) -> float:
    return annual / math.sqrt(TRADING_DAYS)
