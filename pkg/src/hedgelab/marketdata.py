"""OHLC and option-chain ingestion, log-return panels, and data conditioning.

Missing cells are carried as NaN from ingestion through the return panel and
are only resolved by :func:`res_missing_value`; nothing is forward-filled.

File schemas (version 1, comma-delimited, header row required):

* OHLC: ``date, asset, open, high, low, close, market_value``; ISO-8601
  dates; an empty price cell marks the value as missing.
* Options: ``trade_date, expiry_date, strike, close, volume, underlying``
  with an optional ``type`` column (``C``/``P``, calls assumed if absent).
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHANNELS = ("O", "H", "L", "C")
MAX_EXPIRY_TRADING_DAYS = 22
MONEYNESS_BAND = (0.95, 1.05)

DEFAULT_OHLC_COLUMNS = {
    "date": "date",
    "asset": "asset",
    "open": "open",
    "high": "high",
    "low": "low",
    "close": "close",
    "market_value": "market_value",
}


class DataError(ValueError):
    """Raised for malformed or inconsistent market data."""


def _to_dates(values) -> np.ndarray:
    return np.asarray(values, dtype="datetime64[D]")


@dataclass
class PricePanel:
    assets: list[str]
    dates: np.ndarray  # datetime64[D], strictly increasing
    open: np.ndarray  # [assets, dates], NaN = missing
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    market_value: np.ndarray  # [assets]

    def __post_init__(self) -> None:
        self.dates = _to_dates(self.dates)
        shape = (len(self.assets), len(self.dates))
        for name in ("open", "high", "low", "close"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DataError(f"{name} has shape {arr.shape}, expected {shape}")
            present = arr[~np.isnan(arr)]
            if np.any(present <= 0):
                raise DataError(f"{name} contains nonpositive prices")
            setattr(self, name, arr)
        if len(self.dates) > 1 and np.any(np.diff(self.dates.astype(np.int64)) <= 0):
            raise DataError("calendar must be strictly increasing")
        o, h, l, c = self.open, self.high, self.low, self.close
        full = ~(np.isnan(o) | np.isnan(h) | np.isnan(l) | np.isnan(c))
        bad = full & ((h < np.maximum(o, c)) | (l > np.minimum(o, c)))
        if np.any(bad):
            i, t = np.argwhere(bad)[0]
            raise DataError(f"OHLC ordering violated for {self.assets[i]} on {self.dates[t]}")
        self.market_value = np.asarray(self.market_value, dtype=np.float64)
        if self.market_value.shape != (len(self.assets),) or np.any(~(self.market_value > 0)):
            raise DataError("market_value must hold one positive value per asset")

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    def asset_index(self, asset: str) -> int:
        return self.assets.index(asset)

    def date_index(self, day) -> int:
        idx = int(np.searchsorted(self.dates, np.datetime64(day, "D")))
        if idx >= self.n_dates or self.dates[idx] != np.datetime64(day, "D"):
            raise KeyError(f"{day} not in calendar")
        return idx

    def take_dates(self, sl: slice) -> "PricePanel":
        return replace(
            self,
            dates=self.dates[sl],
            open=self.open[:, sl],
            high=self.high[:, sl],
            low=self.low[:, sl],
            close=self.close[:, sl],
        )


@dataclass
class ReturnPanel:
    """Four-channel log returns, stored as ``values[time, asset, channel]``."""

    assets: list[str]
    dates: np.ndarray  # dates of the *later* price in each return
    values: np.ndarray  # [dates-1, assets, 4], channels O, H, L, C
    base_close: np.ndarray  # [assets], close on the first panel date
    market_value: np.ndarray

    def channel(self, name: str) -> np.ndarray:
        """One channel as an [assets x time] matrix."""
        return self.values[:, :, CHANNELS.index(name)].T

    @property
    def r_O(self) -> np.ndarray:
        return self.channel("O")

    @property
    def r_H(self) -> np.ndarray:
        return self.channel("H")

    @property
    def r_L(self) -> np.ndarray:
        return self.channel("L")

    @property
    def r_C(self) -> np.ndarray:
        return self.channel("C")

    def reconstruct_close(self) -> np.ndarray:
        """Closing prices [assets, dates] from ``base_close`` and the close channel."""
        cum = np.cumsum(self.r_C, axis=1)
        return self.base_close[:, None] * np.concatenate([np.ones((len(self.assets), 1)), np.exp(cum)], axis=1)


@dataclass(frozen=True)
class OptionRecord:
    trade_date: date
    expiry_date: date
    strike: float
    close: float
    volume: float
    underlying: str
    kind: str = "C"

    def __post_init__(self) -> None:
        if self.expiry_date < self.trade_date:
            raise DataError(f"expiry {self.expiry_date} precedes trade date {self.trade_date}")
        if not self.strike > 0:
            raise DataError(f"strike must be positive, got {self.strike}")
        if not self.close >= 0:
            raise DataError(f"option price must be nonnegative, got {self.close}")

    @property
    def contract_id(self) -> str:
        return f"{self.underlying}-{self.expiry_date.isoformat()}-{self.kind}{self.strike:g}"


@dataclass
class OptionChain:
    records: list[OptionRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


# ---------------------------------------------------------------------------
# ingestion


def _parse_float(cell: str) -> float:
    cell = cell.strip()
    return math.nan if cell == "" else float(cell)


def ingest_ohlc(path: str | Path, schema: dict[str, str] | None = None) -> PricePanel:
    """Read an OHLC file into a panel aligned on the union calendar."""
    cols = {**DEFAULT_OHLC_COLUMNS, **(schema or {})}
    rows: dict[tuple[str, np.datetime64], tuple[float, float, float, float, float]] = {}
    errors: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in cols.values() if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                day = np.datetime64(date.fromisoformat(row[cols["date"]].strip()), "D")
                asset = row[cols["asset"]].strip()
                if not asset:
                    raise ValueError("empty asset id")
                values = tuple(_parse_float(row[cols[k]]) for k in ("open", "high", "low", "close", "market_value"))
            except (ValueError, TypeError, AttributeError) as exc:
                errors.append(f"line {lineno}: {exc}")
                continue
            if any(v <= 0 for v in values if not math.isnan(v)):
                raise DataError(f"{path}: line {lineno}: nonpositive price or market value")
            key = (asset, day)
            if key in rows:
                raise DataError(f"{path}: line {lineno}: duplicate row for asset {asset} on {day}")
            rows[key] = values
    if errors:
        raise DataError(f"{path}: unparseable rows:\n" + "\n".join(errors))
    if not rows:
        raise DataError(f"{path}: no data rows")

    assets = sorted({a for a, _ in rows})
    dates = np.array(sorted({d for _, d in rows}), dtype="datetime64[D]")
    a_idx = {a: i for i, a in enumerate(assets)}
    d_idx = {d: i for i, d in enumerate(dates)}
    cube = np.full((5, len(assets), len(dates)), np.nan)
    for (asset, day), values in rows.items():
        cube[:, a_idx[asset], d_idx[day]] = values
    mv = np.array([_last_present(cube[4, i]) for i in range(len(assets))])
    return PricePanel(assets, dates, cube[0], cube[1], cube[2], cube[3], mv)


def _last_present(row: np.ndarray) -> float:
    present = row[~np.isnan(row)]
    if present.size == 0:
        raise DataError("asset without any market value")
    return float(present[-1])


def ingest_options(path: str | Path) -> OptionChain:
    records: list[OptionRecord] = []
    errors: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(
                    OptionRecord(
                        trade_date=date.fromisoformat(row["trade_date"].strip()),
                        expiry_date=date.fromisoformat(row["expiry_date"].strip()),
                        strike=float(row["strike"]),
                        close=float(row["close"]),
                        volume=float(row["volume"]),
                        underlying=row["underlying"].strip(),
                        kind=(row.get("type") or "C").strip().upper()[:1],
                    )
                )
            except (ValueError, TypeError, KeyError, AttributeError) as exc:
                errors.append(f"line {lineno}: {exc}")
    if errors:
        raise DataError(f"{path}: unparseable rows:\n" + "\n".join(errors))
    return OptionChain(records)


def write_ohlc(panel: PricePanel, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "asset", "open", "high", "low", "close", "market_value"])
        for t, day in enumerate(panel.dates):
            for i, asset in enumerate(panel.assets):
                cells = [panel.open[i, t], panel.high[i, t], panel.low[i, t], panel.close[i, t]]
                w.writerow([str(day), asset, *("" if math.isnan(v) else repr(float(v)) for v in cells), repr(float(panel.market_value[i]))])


def write_options(chain: OptionChain, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trade_date", "expiry_date", "strike", "close", "volume", "underlying", "type"])
        for r in chain:
            w.writerow([r.trade_date.isoformat(), r.expiry_date.isoformat(), repr(r.strike), repr(r.close), repr(r.volume), r.underlying, r.kind])


# ---------------------------------------------------------------------------
# transforms


def to_log_returns(panel: PricePanel) -> ReturnPanel:
    """r^X_t = ln X_{t+1} - ln C_t for X in O, H, L, C; NaN propagates."""
    if panel.n_dates < 2:
        raise DataError("need at least two dates to form returns")
    prev_close = np.log(panel.close[:, :-1])
    chans = [np.log(getattr(panel, name)[:, 1:]) - prev_close for name in ("open", "high", "low", "close")]
    values = np.stack(chans, axis=-1).transpose(1, 0, 2)  # [time, asset, channel]
    return ReturnPanel(
        assets=list(panel.assets),
        dates=panel.dates[1:],
        values=values,
        base_close=panel.close[:, 0].copy(),
        market_value=panel.market_value.copy(),
    )


def _dropout_logits(market_value: np.ndarray, tau: float, log_values: bool) -> np.ndarray:
    z = np.log(market_value) if log_values else np.asarray(market_value, dtype=np.float64)
    return z / tau


def dropout_probabilities(market_value: np.ndarray, tau: float, log_values: bool = False) -> np.ndarray:
    z = _dropout_logits(market_value, tau, log_values)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def market_value_dropout(
    batch: np.ndarray,
    market_value: np.ndarray,
    p: float,
    tau: float,
    rng: np.random.Generator,
    *,
    asset_axis: int = -2,
    training: bool = True,
    log_values: bool = False,
) -> np.ndarray:
    """Zero floor(N p) assets drawn without replacement, rescale the rest by 1/(1-p).

    Draw probabilities are Softmax(market_value / tau), so high-value assets
    are the ones most likely to be removed. Inference mode is the identity.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout fraction must lie in [0, 1), got {p}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    batch = np.asarray(batch, dtype=np.float64)
    if not training:
        return batch
    n = batch.shape[asset_axis]
    k = int(math.floor(n * p))
    keep = np.ones(n, dtype=bool)
    if k > 0:
        # Gumbel top-k == successive softmax draws without replacement, stable as tau -> 0
        logits = _dropout_logits(market_value, tau, log_values)
        dropped = np.argsort(-(logits + rng.gumbel(size=n)), kind="stable")[:k]
        keep[dropped] = False
    shape = [1] * batch.ndim
    shape[asset_axis] = n
    keep = keep.reshape(shape)
    return np.where(keep, batch / (1.0 - p), 0.0)


def res_missing_value(x, w1, w2):
    """Learned fill: ``w1`` where ``x`` is missing, ``w2 * x + x`` elsewhere.

    ``x`` is an array with NaN markers. With float weights the result is an
    ndarray; with Tensor weights it is a Tensor carrying their gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    missing = np.isnan(x)
    x0 = np.where(missing, 0.0, x)
    if not isinstance(w1, dc.Tensor) and not isinstance(w2, dc.Tensor):
        return np.where(missing, w1, w2 * x0 + x0)
    filled = dc.apply("mul", missing.astype(np.float64), w1)
    return dc.apply("add", filled, dc.apply("add", dc.apply("mul", w2, x0), x0))


def split_by_date(panel, train_end, val_end):
    """Partition a panel's calendar into train / validation / test (inclusive ends)."""
    train_end = np.datetime64(train_end, "D")
    val_end = np.datetime64(val_end, "D")
    if train_end >= val_end:
        raise ValueError("train_end must precede val_end")
    dates = panel.dates
    a = int(np.searchsorted(dates, train_end, side="right"))
    b = int(np.searchsorted(dates, val_end, side="right"))
    if val_end >= dates[-1]:
        warnings.warn("val_end lies at or beyond the calendar end; test split is empty", stacklevel=2)
    return _slice_panel(panel, slice(0, a)), _slice_panel(panel, slice(a, b)), _slice_panel(panel, slice(b, None))


def _slice_panel(panel, sl: slice):
    if isinstance(panel, PricePanel):
        return panel.take_dates(sl)
    return replace(panel, dates=panel.dates[sl], values=panel.values[sl])


def trading_days_between(calendar: np.ndarray, start, end) -> int:
    """Number of calendar dates d with start < d <= end."""
    s = np.datetime64(start, "D")
    e = np.datetime64(end, "D")
    return int(np.searchsorted(calendar, e, side="right") - np.searchsorted(calendar, s, side="right"))


def filter_eligible_options(
    chain: OptionChain,
    underlying: PricePanel,
    *,
    band: tuple[float, float] = MONEYNESS_BAND,
    max_days: int = MAX_EXPIRY_TRADING_DAYS,
    skipped: list[str] | None = None,
) -> OptionChain:
    """Keep call records usable as hedging entries.

    A record qualifies with positive volume, ``band[0] <= S0/K <= band[1]`` at
    its trade date, and at most ``max_days`` trading days to expiry. Records
    whose underlying or dates are not covered are logged and appended to
    ``skipped`` when a list is passed.
    """
    kept: list[OptionRecord] = []
    for rec in chain:
        if rec.kind != "C":
            continue
        try:
            i = underlying.asset_index(rec.underlying)
            t = underlying.date_index(rec.trade_date)
        except (ValueError, KeyError):
            msg = f"{rec.contract_id} on {rec.trade_date}: underlying price unavailable"
            log.warning(msg)
            if skipped is not None:
                skipped.append(msg)
            continue
        if np.datetime64(rec.expiry_date, "D") > underlying.dates[-1]:
            msg = f"{rec.contract_id}: expiry beyond underlying calendar"
            log.warning(msg)
            if skipped is not None:
                skipped.append(msg)
            continue
        s0 = underlying.close[i, t]
        if math.isnan(s0) or rec.volume <= 0:
            continue
        if not band[0] <= s0 / rec.strike <= band[1]:
            continue
        if trading_days_between(underlying.dates, rec.trade_date, rec.expiry_date) > max_days:
            continue
        kept.append(rec)
    return OptionChain(kept)


def window_batches(values: np.ndarray, context_len: int, starts: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``values[s:s+L]`` and one-step-ahead targets ``values[s+1:s+L+1]``."""
    idx = np.asarray(starts)[:, None] + np.arange(context_len)[None, :]
    return values[idx], values[idx + 1]
