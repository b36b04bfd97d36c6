"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

Lines are printed as the tests run and repeated in the terminal summary.
"""
import math
import time
from functools import lru_cache

import numpy as np
import pytest

from hedgelab import agent as ag
from hedgelab import cli
from hedgelab import diffcore as dc
from hedgelab import evalkit as ek
from hedgelab import forecaster as fc
from hedgelab import hedgenv as he
from hedgelab import marketdata as md
from hedgelab import pricing as pr
from hedgelab import synthetic as sy
from hedgelab.gradcheck import max_relative_error
from oracles import bs_call_by_quadrature, gae_double_sum
from test_diffcore import _loss_for, _store

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1 autodiff


def test_c01_autodiff_soundness():
    t0 = time.perf_counter()
    errors = {}
    rng = np.random.default_rng(7)
    for kind in sorted(dc.KERNELS):
        s = _store(
            a=rng.normal(size=(2, 3)),
            b=rng.normal(size=(3, 2)),
            wx=rng.normal(size=(3, 6)) * 0.5,
            wh=rng.normal(size=(2, 6)) * 0.5,
            bg=rng.normal(size=6) * 0.1,
        )
        weights = rng.normal(size=64)
        errors[kind] = max_relative_error(lambda st_: _loss_for(kind, st_, weights), s, h=1e-5)[0]

    net_cfg = ag.NetConfig(frames=3, embed=3, hidden=2, resid=3)
    pol, val = ag.PolicyNet(net_cfg, rng), ag.ValueNet(net_cfg, rng)
    w = np.stack([rng.uniform(0.9, 1.1, (5, 3)), rng.uniform(0.005, 0.08, (5, 3)), rng.uniform(0, 1, (5, 3))], axis=-1)
    a = rng.uniform(0.1, 0.9, 5)
    target = rng.normal(size=5)
    errors["policy"] = max_relative_error(
        lambda s: ag.bc_expert_loss(a, *pol.forward(w, s)) + 0.01 * ag.entropy_loss(pol.forward(w, s)[1]), pol.store, h=1e-6
    )[0]
    errors["value"] = max_relative_error(lambda s: dc.square(val.forward(w, s) - target).mean(), val.store, h=1e-6)[0]

    model = fc.Forecaster(fc.ForecastConfig(k=2, d_model=4, n_heads=2, ffn=3, context_len=3), 2, rng)
    for name, value in model.store.items():
        model.store.set(name, value + rng.normal(0, 0.1, value.shape))
    x = rng.normal(0, 0.02, (2, 3, 2, 4))
    y = rng.normal(0, 0.02, (2, 3, 2, 4))

    def nll(store):
        model.store = store
        return fc.nll_loss(*model.forward_tensors(x), y)

    errors["forecaster"] = max_relative_error(nll, model.store, h=1e-6)[0]
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 60
    report(1, ok, f"{len(errors)} op-kinds/networks, worst rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")


# ---------------------------------------------------------------- 2 pricing


def test_c02_pricing_oracle():
    t0 = time.perf_counter()
    grid = [(m, s, T) for m in np.linspace(0.8, 1.2, 8) for s in np.linspace(0.1, 0.8, 5) for T in np.linspace(0.05, 2.0, 5)]
    assert len(grid) == 200
    price_err = max(abs(float(pr.bs_call_price(100 * m, 100.0, 0.0, s, T)) - bs_call_by_quadrature(100 * m, 100.0, 0.0, s, T)) for m, s, T in grid)

    iv_err = 0.0
    for sigma in np.linspace(0.05, 1.5, 59):
        for S0, T in ((100.0, 0.5), (95.0, 0.1), (105.0, 1.0)):
            c = float(pr.bs_call_price(S0, 100.0, 0.0, sigma, T))
            iv_err = max(iv_err, abs(pr.implied_vol(c, S0, 100.0, 0.0, T) - sigma))

    delta_err = 0.0
    h = 1e-4
    for m, s, T in grid:
        S0 = 100 * m
        fd = (float(pr.bs_call_price(S0 + h, 100.0, 0.0, s, T)) - float(pr.bs_call_price(S0 - h, 100.0, 0.0, s, T))) / (2 * h)
        delta_err = max(delta_err, abs(float(pr.implied_delta(S0, 100.0, 0.0, s, T)) - fd))
    elapsed = time.perf_counter() - t0
    ok = price_err < 1e-6 and iv_err < 1e-6 and delta_err < 1e-5 and elapsed < 60
    report(2, ok, f"price err {price_err:.1e}, iv round-trip err {iv_err:.1e}, delta err {delta_err:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3 Monte Carlo


def test_c03_mc_risk_neutral_price():
    t0 = time.perf_counter()
    steps = 50

    def gen(n, rng):
        return pr.gbm_paths(100.0, 0.3, 0.2, 1.0 / steps, steps, n, rng)

    res = pr.mc_risk_neutral_price(gen, 100.0, 100.0, 0.0, 1.0, 200_000, np.random.default_rng(2024))
    elapsed = time.perf_counter() - t0
    z = (res.price - 7.965567) / res.stderr
    ok = abs(z) < 3 and elapsed < 120
    report(3, ok, f"price {res.price:.5f} +- {res.stderr:.5f} (z = {z:+.2f}) vs 7.965567, {elapsed:.1f}s")


# ---------------------------------------------------------------- 4 RL identities


def test_c04_rl_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    gae_err = 0.0
    endpoint_err = 0.0
    target_mismatch = 0
    target_ulps = 0.0
    n_steps = 0
    for _ in range(1000):
        T = int(rng.integers(1, 23))
        r = np.zeros(T)
        r[-1] = -rng.exponential(0.2)
        r += rng.normal(0, 0.01, T)
        v = rng.normal(-0.1, 0.1, T)
        gamma = float(rng.choice([1.0, 0.99]))
        adv = ag.compute_gae(r, v, gamma, 0.95)
        gae_err = max(gae_err, float(np.max(np.abs(adv - gae_double_sum(r, v, gamma, 0.95)))))
        tgt = ag.value_targets(adv, v)
        target_mismatch += int(np.count_nonzero((tgt - v) != adv))
        target_ulps = max(target_ulps, float(np.max(np.abs((tgt - v) - adv) / np.spacing(np.abs(tgt)))))
        n_steps += T
        nxt = np.r_[v[1:], 0.0]
        td = r + gamma * nxt - v
        endpoint_err = max(endpoint_err, float(np.max(np.abs(ag.compute_gae(r, v, gamma, 0.0) - td))))
        ret = np.array([sum(gamma**i * r[t + i] for i in range(T - t)) for t in range(T)])
        endpoint_err = max(endpoint_err, float(np.max(np.abs(ag.compute_gae(r, v, gamma, 1.0) - (ret - v)))))
    elapsed = time.perf_counter() - t0
    ok = gae_err < 1e-12 and endpoint_err < 1e-12 and target_mismatch == 0 and elapsed < 30
    report(
        4,
        ok,
        f"GAE vs double sum {gae_err:.1e}, lambda endpoints {endpoint_err:.1e}, "
        f"targets - values != advantages at {target_mismatch}/{n_steps} steps (max {target_ulps:.2f} ulp of target), {elapsed:.1f}s",
    )


# ---------------------------------------------------------------- 5 accounting


def test_c05_environment_accounting():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    n = 10_000
    eps = he.make_episodes(n, rng, steps=(1, 22), sigma=0.3)
    eps = eps.with_cost(rng.uniform(0, 0.005, n))
    acts = rng.uniform(0, 1, (n, eps.t_max))
    env = he.BatchHedgeEnv(eps)
    env.reset()
    nonterminal_nonzero = 0
    for t in range(eps.t_max):
        _, rew, done = env.step(acts[:, t])
        live_not_done = (t < eps.steps) & ~done
        nonterminal_nonzero += int(np.count_nonzero(rew[live_not_done]))
    worst = 0.0
    for b in range(n):
        k = int(eps.steps[b])
        closed = he.terminal_pv(eps.paths[b, : k + 1], acts[b, :k], eps.K[b], eps.V0[b], float(eps.cost_rate[b]))
        worst = max(worst, abs(closed.pv - env.pv[b]))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and nonterminal_nonzero == 0 and elapsed < 60
    report(5, ok, f"max |stepwise - closed form| {worst:.1e} over {n} episodes, {nonterminal_nonzero} nonzero non-terminal rewards, {elapsed:.1f}s")


# ---------------------------------------------------------------- 6 behaviour cloning


def _expert_pairs(n_pairs, rng):
    ds = pr.synthetic_expert_dataset(n_pairs // 8, rng)
    assert len(ds) >= n_pairs
    return ds.subset(np.arange(n_pairs))


def test_c06_bc_fidelity():
    t0 = time.perf_counter()
    train = _expert_pairs(5000, np.random.default_rng(60))
    held = _expert_pairs(1000, np.random.default_rng(61))
    policy = ag.PolicyNet(ag.NetConfig(), np.random.default_rng(62))
    res = ag.bc_pretrain(policy, train, ag.BCConfig(epochs=30), np.random.default_rng(63))
    mu, sigma = res.policy(held.windows(res.policy.cfg.frames))
    mae = float(np.mean(np.abs(mu - held.actions)))
    elapsed = time.perf_counter() - t0
    floor = res.policy.cfg.sigma_floor
    ok = mae < 0.05 and float(sigma.min()) > floor and elapsed < 300
    report(6, ok, f"held-out MAE {mae:.4f} on {len(held)} pairs, min sigma {sigma.min():.4f} > floor {floor}, {elapsed:.1f}s")


# ---------------------------------------------------------------- shared agents


def _gbm_factory(cost):
    return lambda n, rng: he.make_episodes(n, rng, steps=20, sigma=0.2, cost_rate=cost)


@lru_cache(maxsize=None)
def _pretrained(seed: int) -> ag.PolicyNet:
    expert = pr.synthetic_expert_dataset(500, np.random.default_rng([seed, 1]))
    policy = ag.PolicyNet(ag.NetConfig(), np.random.default_rng([seed, 2]))
    return ag.bc_pretrain(policy, expert, ag.BCConfig(epochs=30), np.random.default_rng([seed, 3])).policy


@lru_cache(maxsize=None)
def _agent(seed: int, cost: float, bc: bool = True) -> ag.PolicyNet:
    """Desk-scale fine-tuned agent; without BC the same budget starts from a random policy."""
    start = _pretrained(seed) if bc else ag.PolicyNet(ag.NetConfig(), np.random.default_rng([seed, 2]))
    res = ag.finetune(_gbm_factory(cost), start, None, ag.TrainConfig(epochs=30), np.random.default_rng([seed, 4]))
    return res.policy


def _eval_episodes(cost=0.0):
    return he.make_episodes(2000, np.random.default_rng(777), steps=20, sigma=0.2, cost_rate=cost)


# ---------------------------------------------------------------- 7 zero-cost hedging


def test_c07_end_to_end_zero_cost():
    t0 = time.perf_counter()
    policy = _agent(0, 0.0)
    eps = _eval_episodes()
    agent = ek.evaluate(ek.AgentStrategy(policy), eps)
    zero = ek.evaluate(ek.ZeroAction(), eps)
    delta = ek.evaluate(ek.ImpliedDelta(), eps)
    elapsed = time.perf_counter() - t0
    std_ratio = agent.std_pv / zero.std_pv
    r_ratio = abs(agent.avg_r) / abs(delta.avg_r)
    ok = std_ratio < 0.4 and r_ratio <= 1.5 and elapsed < 600
    report(7, ok, f"std_PV ratio to zero-action {std_ratio:.3f} (< 0.4), |avg_r| ratio to Delta {r_ratio:.3f} (<= 1.5), {elapsed:.1f}s")


# ---------------------------------------------------------------- 8 cost sweep


def test_c08_cost_sweep_direction():
    t0 = time.perf_counter()
    policy = _agent(0, 4e-4)
    cs = [0.0, 2e-4, 4e-4, 8e-4]
    sweep = ek.cost_sweep({"agent": ek.AgentStrategy(policy), "delta": ek.ImpliedDelta()}, cs, _eval_episodes())
    gaps = [sweep.get("agent", c).avg_r - sweep.get("delta", c).avg_r for c in cs]
    elapsed = time.perf_counter() - t0
    beats = gaps[2] >= 0
    monotone = all(b >= a for a, b in zip(gaps, gaps[1:]))
    ok = beats and monotone and elapsed < 600
    report(8, ok, "avg_r gap agent - Delta at c = 0, 2e-4, 4e-4, 8e-4: " + ", ".join(f"{g:+.2e}" for g in gaps) + f", {elapsed:.1f}s")


# ---------------------------------------------------------------- 9 ablation


def test_c09_ablation_direction():
    t0 = time.perf_counter()
    eps = _eval_episodes()
    rows = []
    for seed in range(3):
        full = ek.evaluate(ek.AgentStrategy(_agent(seed, 0.0)), eps).avg_r
        no_bc = ek.evaluate(ek.AgentStrategy(_agent(seed, 0.0, bc=False)), eps).avg_r
        rows.append((full, no_bc))
    elapsed = time.perf_counter() - t0
    ok = all(nb <= f for f, nb in rows) and elapsed < 900
    report(9, ok, "avg_r full vs without BC per seed: " + "; ".join(f"{f:.4f} vs {nb:.4f}" for f, nb in rows) + f", {elapsed:.1f}s")


# ---------------------------------------------------------------- 10 forecaster


def test_c10_forecaster_calibration():
    t0 = time.perf_counter()
    sigmas = (0.2, 0.4)
    panel = sy.gbm_ohlc_panel(1501, sigmas, np.random.default_rng(100))
    returns = md.to_log_returns(panel)
    d = returns.dates
    train, val, test = md.split_by_date(returns, d[999], d[1249])
    cfg = fc.ForecastConfig(k=2, d_model=8, n_heads=2, ffn=16, context_len=16, epochs=30)
    model, _ = fc.train(train, val, cfg, np.random.default_rng(101))
    nll = fc.evaluate_nll(model, test.values)
    baseline = fc.constant_gaussian_nll(train.values, test.values)
    per_asset = fc.constant_gaussian_nll(train.values, test.values, per_asset=True)
    cond = panel.take_dates(slice(0, 1001))
    paths = fc.sample_paths(model, cond, 20, 400, np.random.default_rng(102)).paths
    lr = np.log(paths[:, -1] / paths[:, 0])
    target = np.array(sigmas) / math.sqrt(pr.TRADING_DAYS) * math.sqrt(20)
    rel = np.abs(lr.std(axis=0, ddof=1) / target - 1)
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(rel < 0.25)) and nll < baseline and elapsed < 600
    report(
        10,
        ok,
        f"20-step std rel err {', '.join(f'{x:.3f}' for x in rel)} (< 0.25); held-out NLL {nll:.4f} vs constant Gaussian "
        f"{baseline:.4f} (per-asset fit {per_asset:.4f}), {elapsed:.1f}s",
    )


# ---------------------------------------------------------------- 11 determinism

PIPELINE_OVERRIDES = [
    "forecaster.epochs=2",
    "forecaster.steps_per_epoch=3",
    "forecaster.context_len=8",
    "forecaster.n_paths=4",
    "forecaster.horizon=5",
    "agent.bc.epochs=2",
    "agent.train.epochs=2",
    "agent.train.n_path=32",
    "agent.train.n_validation=32",
    "eval.n_episodes=200",
]


def test_c11_cli_determinism(tmp_path):
    t0 = time.perf_counter()
    roots = [tmp_path / "first", tmp_path / "second"]
    statuses = []
    for root in roots:
        for command in cli.COMMANDS:
            statuses.append(cli.run(command, None, PIPELINE_OVERRIDES, output=root))
    files = sorted(p.relative_to(roots[0]) for p in roots[0].rglob("*") if p.is_file())
    differing = [str(f) for f in files if (roots[0] / f).read_bytes() != (roots[1] / f).read_bytes()]
    metrics = [f for f in files if f.suffix == ".csv" and f.parent.name in ("evaluate", "sweep", "grid")]
    elapsed = time.perf_counter() - t0
    ok = all(s == 0 for s in statuses) and not differing and len(metrics) > 0
    report(11, ok, f"{len(cli.COMMANDS)} commands x 2 runs, {len(files)} artifacts ({len(metrics)} metrics files), {len(differing)} differ {differing[:3]}, {elapsed:.1f}s")
