"""Probabilistic return forecaster with low-rank asset attention.

Shapes inside the network, for a batch of B windows of L steps over n assets:

    inputs      [B, L, n, 4]   log returns, NaN where missing
    fill+embed  [B, L, n, d]   learned missing fill, channel projection, asset embedding
    encode      [B, L, k, d]   softmax(W_Q E^T / sqrt d) E per step
    temporal    [B, k, L, d]   causal pre-norm attention blocks per latent asset
    decode      [B, L, n, d]   softmax(Q_dec H^T / sqrt d) H per step, plus embed skip
    heads       [B, L, n, 4]   mu, sigma = softplus(raw) + sigma_floor

Output at step t is the one-step-ahead forecast of step t+1.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, NonFiniteError, ParamStore, Tensor, adam_step, backward, param
from .marketdata import CHANNELS, PricePanel, ReturnPanel, market_value_dropout, res_missing_value, to_log_returns

NEG_INF = -1e30


class ForecastError(RuntimeError):
    pass


@dataclass
class ForecastConfig:
    k: int = 11
    d_model: int = 16
    n_layers: int = 1
    n_heads: int = 2
    ffn: int = 32
    context_len: int = 32
    sigma_floor: float = 1e-4
    dropout_p: float = 0.1
    tau: float = 1.0
    log_market_value: bool = True
    input_scale: float = 50.0
    # optimisation
    lr: float = 3e-3
    batch_size: int = 32
    epochs: int = 40
    steps_per_epoch: int = 20
    max_grad_norm: float | None = 5.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")
        if self.context_len < 2:
            raise ValueError("context_len must be at least 2")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")


@dataclass
class GaussianForecast:
    mu: np.ndarray  # [..., assets, channels]
    sigma: np.ndarray


@dataclass
class PricePathSet:
    paths: np.ndarray  # [n_paths, horizon + 1, assets], closes
    seeds: np.ndarray  # per-path generator seeds
    assets: list[str]


# ---------------------------------------------------------------------------
# attention pieces


def low_rank_encode(E, W_Q) -> Tensor:
    """Compress n asset rows to k latent rows: softmax(W_Q E^T / sqrt d) E.

    ``E`` is [..., n, d] and ``W_Q`` is [k, d]; softmax runs over the n axis.
    """
    E = E if isinstance(E, Tensor) else Tensor(E)
    W_Q = W_Q if isinstance(W_Q, Tensor) else Tensor(W_Q)
    if E.shape[-1] != W_Q.shape[-1]:
        raise dc.ShapeError(f"encode: width of E {E.shape} and W_Q {W_Q.shape} differ")
    if E.shape[-2] < 1:
        raise dc.ShapeError("encode needs at least one asset")
    d = E.shape[-1]
    axes = tuple(range(E.ndim - 2)) + (E.ndim - 1, E.ndim - 2)
    scores = (W_Q @ E.transpose(*axes)) / math.sqrt(d)
    return dc.softmax(scores, axis=-1) @ E


def low_rank_decode(H, queries) -> Tensor:
    """Expand k latent rows back to n assets: softmax(Q H^T / sqrt d) H."""
    H = H if isinstance(H, Tensor) else Tensor(H)
    queries = queries if isinstance(queries, Tensor) else Tensor(queries)
    if H.shape[-1] != queries.shape[-1]:
        raise dc.ShapeError(f"decode: width of H {H.shape} and queries {queries.shape} differ")
    d = H.shape[-1]
    axes = tuple(range(H.ndim - 2)) + (H.ndim - 1, H.ndim - 2)
    scores = (queries @ H.transpose(*axes)) / math.sqrt(d)
    return dc.softmax(scores, axis=-1) @ H


def sinusoidal_positions(L: int, d: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(L: int) -> np.ndarray:
    return np.triu(np.full((L, L), NEG_INF), k=1)


# ---------------------------------------------------------------------------
# model


class Forecaster:
    def __init__(self, cfg: ForecastConfig, n_assets: int, rng: np.random.Generator | None = None, store: ParamStore | None = None):
        self.cfg = cfg
        self.n_assets = n_assets
        if store is None:
            store = self._init(np.random.default_rng(0) if rng is None else rng)
        self.store = store

    def _init(self, rng: np.random.Generator) -> ParamStore:
        c, n, d, C = self.cfg, self.n_assets, self.cfg.d_model, len(CHANNELS)
        s = ParamStore()
        s.add("fill.w1", np.zeros(C))
        s.add("fill.w2", np.zeros(C))
        s.add("embed.w", rng.normal(0, 1 / math.sqrt(C), (C, d)))
        s.add("embed.b", np.zeros(d))
        s.add("embed.asset", rng.normal(0, 0.1, (n, d)))
        s.add("encode.q", rng.normal(0, 1 / math.sqrt(d), (c.k, d)))
        for i in range(c.n_layers):
            p = f"block{i}."
            for name in ("ln1", "ln2"):
                s.add(p + name + ".g", np.ones(d))
                s.add(p + name + ".b", np.zeros(d))
            for name in ("wq", "wk", "wv", "wo"):
                s.add(p + name, rng.normal(0, 1 / math.sqrt(d), (d, d)))
            s.add(p + "ff1.w", rng.normal(0, 1 / math.sqrt(d), (d, c.ffn)))
            s.add(p + "ff1.b", np.zeros(c.ffn))
            s.add(p + "ff2.w", rng.normal(0, 1 / math.sqrt(c.ffn), (c.ffn, d)))
            s.add(p + "ff2.b", np.zeros(d))
        s.add("decode.q", rng.normal(0, 1 / math.sqrt(d), (n, d)))
        s.add("mu.w", rng.normal(0, 0.01, (d, C)))
        s.add("mu.b", np.zeros(C))
        s.add("sigma.w", rng.normal(0, 0.01, (d, C)))
        s.add("sigma.b", np.full(C, math.log(math.expm1(0.01))))
        return s

    # -- forward -------------------------------------------------------
    def _block(self, x: Tensor, i: int, mask: np.ndarray) -> Tensor:
        s, c = self.store, self.cfg
        p = f"block{i}."
        B, K, L, d = x.shape
        h, dh = c.n_heads, d // c.n_heads
        y = dc.layer_norm(x, param(s, p + "ln1.g"), param(s, p + "ln1.b"))

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, K, L, h, dh).transpose(0, 1, 3, 2, 4)

        q = heads(y @ param(s, p + "wq"))
        k = heads(y @ param(s, p + "wk"))
        v = heads(y @ param(s, p + "wv"))
        att = dc.softmax(q @ k.transpose(0, 1, 2, 4, 3) / math.sqrt(dh) + mask, axis=-1)
        out = (att @ v).transpose(0, 1, 3, 2, 4).reshape(B, K, L, d)
        x = x + out @ param(s, p + "wo")
        y = dc.layer_norm(x, param(s, p + "ln2.g"), param(s, p + "ln2.b"))
        ff = dc.tanh(y @ param(s, p + "ff1.w") + param(s, p + "ff1.b")) @ param(s, p + "ff2.w") + param(s, p + "ff2.b")
        return x + ff

    def forward_tensors(self, x: np.ndarray, keep: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """(mu, sigma) tensors [B, L, n, 4] for raw windows ``x`` [B, L, n, 4].

        ``keep`` is an optional multiplicative asset mask [n] from market-value dropout.
        """
        s, c = self.store, self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[2:] != (self.n_assets, len(CHANNELS)):
            raise dc.ShapeError(f"forecaster expects [B, L, {self.n_assets}, 4], got {x.shape}")
        B, L, n, _ = x.shape
        layer = "fill"
        try:
            filled = res_missing_value(x * c.input_scale, param(s, "fill.w1"), param(s, "fill.w2"))
            if keep is not None:
                filled = filled * keep[:, None]
            layer = "embed"
            E = filled @ param(s, "embed.w") + param(s, "embed.b") + param(s, "embed.asset")
            layer = "encode"
            Z = low_rank_encode(E, param(s, "encode.q"))  # [B, L, k, d]
            layer = "temporal"
            Z = Z.transpose(0, 2, 1, 3) + sinusoidal_positions(L, c.d_model)
            mask = causal_mask(L)
            for i in range(c.n_layers):
                layer = f"block{i}"
                Z = self._block(Z, i, mask)
            layer = "decode"
            D = low_rank_decode(Z.transpose(0, 2, 1, 3), param(s, "decode.q")) + E
            layer = "heads"
            mu = (D @ param(s, "mu.w") + param(s, "mu.b")) / c.input_scale
            sigma = dc.softplus(D @ param(s, "sigma.w") + param(s, "sigma.b")) + c.sigma_floor
        except NonFiniteError as exc:
            raise NonFiniteError(f"forecaster layer {layer!r}: {exc}") from exc
        return mu, sigma

    def forward(self, window: np.ndarray) -> GaussianForecast:
        """Forecast for the step after a window [L, n, 4] (or a batch [B, L, n, 4])."""
        x = np.asarray(window, dtype=np.float64)
        single = x.ndim == 3
        mu, sigma = self.forward_tensors(x[None] if single else x)
        m, sg = mu.data[:, -1], sigma.data[:, -1]
        return GaussianForecast(m[0], sg[0]) if single else GaussianForecast(m, sg)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.store.save(directory / "forecaster.ckpt")
        meta = {"config": asdict(self.cfg), "n_assets": self.n_assets}
        (directory / "forecaster.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Forecaster":
        directory = Path(directory)
        meta = json.loads((directory / "forecaster.json").read_text())
        return cls(ForecastConfig(**meta["config"]), meta["n_assets"], store=ParamStore.load(directory / "forecaster.ckpt"))


def nll_loss(mu, sigma, target, sigma_floor: float | None = None) -> Tensor:
    """Mean over non-missing cells of log sigma + (r - mu)^2 / (2 sigma^2)."""
    target = np.asarray(target, dtype=np.float64)
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    if mu.shape != target.shape or sigma.shape != target.shape:
        raise dc.ShapeError(f"nll: shapes {mu.shape}, {sigma.shape} vs target {target.shape}")
    if sigma_floor is not None and np.any(sigma.data < sigma_floor):
        raise ValueError("sigma below its floor reached the loss")
    present = ~np.isnan(target)
    count = int(present.sum())
    if count == 0:
        raise ValueError("no observed targets")
    r = np.where(present, target, 0.0)
    w = present.astype(np.float64)
    cell = dc.ln(sigma) + dc.square(r - mu) / (2.0 * dc.square(sigma))
    return (cell * w).sum() / count


def constant_gaussian_nll(train: np.ndarray, test: np.ndarray, *, per_asset: bool = False) -> float:
    """Held-out NLL of the maximum-likelihood constant Gaussian.

    Fit per channel on ``train`` [T, n, 4] (pooled over assets unless
    ``per_asset``), scored on ``test`` with the same cell formula as nll_loss.
    """
    axis = 0 if per_asset else (0, 1)
    mu = np.nanmean(train, axis=axis)
    sigma = np.nanstd(train, axis=axis)
    present = ~np.isnan(test)
    cell = np.log(sigma) + (test - mu) ** 2 / (2 * sigma**2)
    return float(cell[present].mean())


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    epoch: list[int]
    train_nll: list[float]
    val_nll: list[float]
    best_epoch: int

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_nll", "val_nll"])
            for row in zip(self.epoch, self.train_nll, self.val_nll):
                w.writerow([row[0], f"{row[1]:.10g}", f"{row[2]:.10g}"])


def evaluate_nll(model: Forecaster, values: np.ndarray) -> float:
    """Teacher-forced NLL over consecutive non-overlapping windows of ``values``."""
    L = model.cfg.context_len
    starts = np.arange(0, len(values) - L, L)
    if len(starts) == 0:
        raise ValueError(f"need more than {L} return rows to evaluate")
    idx = starts[:, None] + np.arange(L)[None, :]
    mu, sigma = model.forward_tensors(values[idx])
    return nll_loss(mu, sigma, values[idx + 1]).item()


def train(
    train_panel: ReturnPanel,
    val_panel: ReturnPanel | None,
    cfg: ForecastConfig,
    rng: np.random.Generator,
    model: Forecaster | None = None,
) -> tuple[Forecaster, TrainReport]:
    """Adam on teacher-forced NLL with market-value dropout; keeps the best validation epoch."""
    values = train_panel.values
    L = cfg.context_len
    n_starts = len(values) - L
    if n_starts < 1:
        raise ValueError(f"training set has {len(values)} return rows; need more than context_len={L}")
    model = model or Forecaster(cfg, values.shape[1], rng)
    mv = train_panel.market_value
    mv = np.where(np.isfinite(mv) & (mv > 0), mv, np.nanmin(mv[mv > 0]) if np.any(mv > 0) else 1.0)
    val_values = val_panel.values if val_panel is not None and len(val_panel.values) > L else None
    epochs, tr_curve, va_curve = [], [], []
    best_score, best_store, best_epoch = math.inf, model.store.copy(), 0
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for _ in range(cfg.steps_per_epoch):
            starts = rng.integers(0, n_starts, size=cfg.batch_size)
            idx = starts[:, None] + np.arange(L)[None, :]
            keep = market_value_dropout(np.ones(values.shape[1]), mv, cfg.dropout_p, cfg.tau, rng, asset_axis=0, log_values=cfg.log_market_value)
            try:
                with Graph() as g:
                    mu, sigma = model.forward_tensors(values[idx], keep)
                    loss = nll_loss(mu, sigma, values[idx + 1])
                grads = backward(loss, g, model.store)
            except NonFiniteError as exc:
                raise ForecastError(f"training diverged at epoch {epoch}: {exc}") from exc
            adam_step(model.store, grads, cfg.lr, max_grad_norm=cfg.max_grad_norm)
            total += loss.item()
        tr = total / cfg.steps_per_epoch
        if not math.isfinite(tr):
            raise ForecastError(f"training NLL became non-finite at epoch {epoch}")
        va = evaluate_nll(model, val_values) if val_values is not None else tr
        epochs.append(epoch)
        tr_curve.append(tr)
        va_curve.append(va)
        if va < best_score:
            best_score, best_store, best_epoch = va, model.store.copy(), epoch
    model.store = best_store
    return model, TrainReport(epochs, tr_curve, va_curve, best_epoch)


# ---------------------------------------------------------------------------
# sampling


def sample_paths(
    model: Forecaster,
    conditioning: PricePanel,
    horizon: int,
    n_paths: int,
    rng: np.random.Generator,
) -> PricePathSet:
    """Autoregressive close-price paths from the tail of ``conditioning``.

    Each path owns a generator seeded from ``rng``, so results do not depend
    on how paths are batched. All four channels are drawn; only the close
    channel moves prices.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if conditioning.n_assets != model.n_assets:
        raise ValueError("conditioning panel has a different asset universe")
    L = model.cfg.context_len
    returns = to_log_returns(conditioning).values
    if len(returns) < L:
        raise ValueError(f"conditioning needs at least {L + 1} dates, got {conditioning.n_dates}")
    last_close = conditioning.close[:, -1]
    if np.any(~np.isfinite(last_close)):
        raise ValueError("conditioning close on the last date is missing")
    seeds = rng.integers(0, 2**63 - 1, size=n_paths)
    gens = [np.random.default_rng(int(s)) for s in seeds]
    n = model.n_assets
    context = np.repeat(returns[-L:][None], n_paths, axis=0)
    log_px = np.tile(np.log(last_close), (n_paths, 1))
    out = np.empty((n_paths, horizon + 1, n))
    out[:, 0] = last_close
    for h in range(1, horizon + 1):
        fc = model.forward(context)
        z = np.stack([g.standard_normal((n, len(CHANNELS))) for g in gens])
        r = fc.mu + fc.sigma * z
        log_px = log_px + r[:, :, CHANNELS.index("C")]
        out[:, h] = np.exp(log_px)
        context = np.concatenate([context[:, 1:], r[:, None]], axis=1)
    return PricePathSet(out, seeds, list(conditioning.assets))


def path_generator(model: Forecaster, conditioning: PricePanel, asset: str, S0: float = 100.0):
    """Adapter to the hedging environment's (n, steps, rng) -> [n, steps + 1] interface, rescaled to S0."""
    i = conditioning.asset_index(asset)

    def gen(n: int, steps: int, rng: np.random.Generator) -> np.ndarray:
        paths = sample_paths(model, conditioning, steps, n, rng).paths[:, :, i]
        return S0 * paths / paths[:, :1]

    return gen


def write_paths(path: str | Path, paths: PricePathSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "seed", "step", "asset", "close"])
        for p in range(paths.paths.shape[0]):
            for t in range(paths.paths.shape[1]):
                for a, name in enumerate(paths.assets):
                    w.writerow([p, int(paths.seeds[p]), t, name, repr(float(paths.paths[p, t, a]))])
