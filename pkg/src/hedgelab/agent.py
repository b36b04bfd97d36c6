"""Recurrent Gaussian actor-critic for the hedging MDP.

Pipeline: behaviour cloning on expert Delta pairs, then clipped PPO with
GAE advantages and lambda-return value targets. An A2C updater is kept as a
baseline. Actor and critic share an architecture but not parameters:

    frames x_{t-m+1..t} -> per-frame tanh embed -> GRU -> h
    latest frame x_t    -> tanh layer            -> q
    [h, q, feat(x_t)]   -> mu = sigmoid(.), sigma = softplus(.) + floor
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, NonFiniteError, ParamStore, Tensor, adam_step, backward, param
from .hedgenv import BatchHedgeEnv, EpisodeBatch
from .pricing import TRADING_DAYS, ExpertDataset

LOG_2PI = math.log(2.0 * math.pi)
N_FEATURES = 4


class AgentError(RuntimeError):
    """Training diverged or a batch was rejected; message carries diagnostics."""


def observation_features(obs: np.ndarray) -> np.ndarray:
    """Fixed scaling of raw observations (S/K, tte_years, a_prev) -> 4 features.

    The fourth feature is log-moneyness per unit of root time to expiry, the
    natural coordinate of a Delta hedge; it is clipped to keep inputs bounded.
    """
    obs = np.asarray(obs, dtype=np.float64)
    lm = np.log(obs[..., 0])
    tte = np.maximum(obs[..., 1], 0.0)
    z = np.clip(lm / np.sqrt(np.maximum(tte, 1.0 / TRADING_DAYS)) * 5.0, -8.0, 8.0)
    return np.stack([10.0 * lm, np.sqrt(tte * TRADING_DAYS / 22.0), obs[..., 2], z], axis=-1)


def stack_frames(history: np.ndarray, m: int) -> np.ndarray:
    """Last ``m`` observations of ``history`` [B, t+1, d] as [B, m, d], padded with the first."""
    t = history.shape[1] - 1
    idx = np.maximum(np.arange(t - m + 1, t + 1), 0)
    return history[:, idx]


# ---------------------------------------------------------------------------
# networks


@dataclass
class NetConfig:
    frames: int = 8
    embed: int = 16
    hidden: int = 16
    resid: int = 32
    sigma_floor: float = 0.01
    sigma_init: float = 0.05
    use_gru: bool = True

    def __post_init__(self) -> None:
        if self.frames < 1 or min(self.embed, self.hidden, self.resid) < 1:
            raise ValueError("network sizes must be positive")
        if not 0 < self.sigma_floor < self.sigma_init:
            raise ValueError("need 0 < sigma_floor < sigma_init")


def _init_trunk(store: ParamStore, cfg: NetConfig, rng: np.random.Generator) -> None:
    F, E, H, R = N_FEATURES, cfg.embed, cfg.hidden, cfg.resid
    store.add("embed.w", rng.normal(0, 1 / math.sqrt(F), (F, E)))
    store.add("embed.b", np.zeros(E))
    store.add("gru.wx", rng.normal(0, 1 / math.sqrt(E), (E, 3 * H)))
    store.add("gru.wh", rng.normal(0, 1 / math.sqrt(H), (H, 3 * H)))
    store.add("gru.b", np.zeros(3 * H))
    store.add("resid.w", rng.normal(0, 1 / math.sqrt(F), (F, R)))
    store.add("resid.b", np.zeros(R))


def _trunk(store: ParamStore, cfg: NetConfig, feats: np.ndarray) -> Tensor:
    """Shared architecture; ``feats`` is [N, m, F] already scaled."""
    N = feats.shape[0]
    latest = feats[:, -1]
    parts = []
    if cfg.use_gru:
        we, be = param(store, "embed.w"), param(store, "embed.b")
        wx, wh, b = param(store, "gru.wx"), param(store, "gru.wh"), param(store, "gru.b")
        h = Tensor(np.zeros((N, cfg.hidden)))
        for j in range(feats.shape[1]):
            e = dc.tanh(feats[:, j] @ we + be)
            h = dc.gru_cell(e, h, wx, wh, b)
        parts.append(h)
    else:
        parts.append(Tensor(np.zeros((N, cfg.hidden))))
    q = dc.tanh(latest @ param(store, "resid.w") + param(store, "resid.b"))
    parts += [q, Tensor(latest)]
    return dc.concat(parts, axis=1)


def _head_width(cfg: NetConfig) -> int:
    return cfg.hidden + cfg.resid + N_FEATURES


class PolicyNet:
    """Gaussian policy over frame-stacked windows of raw observations."""

    def __init__(self, cfg: NetConfig | None = None, rng: np.random.Generator | None = None, store: ParamStore | None = None):
        self.cfg = cfg or NetConfig()
        if store is None:
            rng = rng or np.random.default_rng(0)
            store = ParamStore()
            _init_trunk(store, self.cfg, rng)
            Z = _head_width(self.cfg)
            store.add("mu.w", rng.normal(0, 0.1 / math.sqrt(Z), (Z, 1)))
            store.add("mu.b", np.zeros(1))
            store.add("sigma.w", np.zeros((Z, 1)))
            # softplus inverse so that sigma starts at sigma_init
            s0 = self.cfg.sigma_init - self.cfg.sigma_floor
            store.add("sigma.b", np.array([math.log(math.expm1(s0))]))
        self.store = store

    def forward(self, windows: np.ndarray, store: ParamStore | None = None) -> tuple[Tensor, Tensor]:
        """(mu, sigma), each [N], for raw windows [N, m, 3]."""
        store = store or self.store
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1:] != (self.cfg.frames, 3):
            raise dc.ShapeError(f"policy expects windows [N, {self.cfg.frames}, 3], got {windows.shape}")
        z = _trunk(store, self.cfg, observation_features(windows))
        # bounded logit keeps mu strictly inside (0, 1) in float64
        mu = dc.sigmoid(dc.clip(z @ param(store, "mu.w") + param(store, "mu.b"), -30.0, 30.0))
        sigma = dc.softplus(z @ param(store, "sigma.w") + param(store, "sigma.b")) + self.cfg.sigma_floor
        return mu.reshape(-1), sigma.reshape(-1)

    def __call__(self, windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu, sigma = self.forward(windows)
        return mu.data, sigma.data

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.cfg, store=self.store.copy())


class ValueNet:
    """Critic with the same trunk as the policy and a scalar head."""

    def __init__(self, cfg: NetConfig | None = None, rng: np.random.Generator | None = None, store: ParamStore | None = None):
        self.cfg = cfg or NetConfig()
        if store is None:
            rng = rng or np.random.default_rng(1)
            store = ParamStore()
            _init_trunk(store, self.cfg, rng)
            Z = _head_width(self.cfg)
            store.add("v.w", rng.normal(0, 0.1 / math.sqrt(Z), (Z, 1)))
            store.add("v.b", np.zeros(1))
        self.store = store

    def forward(self, windows: np.ndarray, store: ParamStore | None = None) -> Tensor:
        store = store or self.store
        z = _trunk(store, self.cfg, observation_features(windows))
        return (z @ param(store, "v.w") + param(store, "v.b")).reshape(-1)

    def __call__(self, windows: np.ndarray) -> np.ndarray:
        return self.forward(windows).data

    def copy(self) -> "ValueNet":
        return ValueNet(self.cfg, store=self.store.copy())


def gaussian_log_prob(a, mu: Tensor, sigma: Tensor) -> Tensor:
    return -dc.ln(sigma) - 0.5 * LOG_2PI - dc.square(a - mu) / (2.0 * dc.square(sigma))


def bc_expert_loss(a_expert, mu: Tensor, sigma: Tensor) -> Tensor:
    """Gaussian NLL mean[1/2 ln(2 pi sigma^2) + (mu - a)^2 / (2 sigma^2)]."""
    return (-gaussian_log_prob(a_expert, mu, sigma)).mean()


def entropy_loss(sigma: Tensor) -> Tensor:
    """Negative Gaussian entropy, -mean[1/2 ln(2 pi e sigma^2)]."""
    return -(dc.ln(sigma) + 0.5 * (LOG_2PI + 1.0)).mean()


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    gamma: float = 1.0
    lam: float = 0.95
    clip: float = 0.2
    entropy_weight: float = 0.01
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    n_path: int = 256
    n_actor_update: int = 4
    n_critic_update: int = 4
    batch_size: int = 512
    epochs: int = 30
    critic_warmup: int = 3
    normalize_advantages: bool = True
    max_grad_norm: float | None = 1.0
    n_validation: int = 512
    validation_seed: int = 12345

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must be in [0, 1]")
        if not 0 < self.clip < 1:
            raise ValueError("clip must be in (0, 1)")
        if min(self.n_path, self.batch_size, self.n_validation) < 1 or self.epochs < 0:
            raise ValueError("counts must be positive")


@dataclass
class BCConfig:
    epochs: int = 40
    batch_size: int = 256
    lr: float = 3e-3
    entropy_weight: float = 0.01
    max_grad_norm: float | None = 5.0


# ---------------------------------------------------------------------------
# behaviour cloning


@dataclass
class BCResult:
    policy: PolicyNet
    expert_loss: list[float]
    entropy_loss: list[float]


def bc_pretrain(policy: PolicyNet, expert: ExpertDataset, cfg: BCConfig, rng: np.random.Generator) -> BCResult:
    """Fit the policy heads to expert actions by maximum likelihood plus an entropy bonus."""
    if len(expert) == 0:
        raise ValueError("expert set is empty")
    policy = policy.copy()
    store = policy.store
    windows = expert.windows(policy.cfg.frames)
    actions = expert.actions
    curve_e, curve_h = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(expert))
        tot_e = tot_h = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                with Graph() as g:
                    mu, sigma = policy.forward(windows[idx])
                    le = bc_expert_loss(actions[idx], mu, sigma)
                    lh = entropy_loss(sigma)
                    loss = le + cfg.entropy_weight * lh
                grads = backward(loss, g, store)
            except NonFiniteError as exc:
                raise AgentError(f"behaviour cloning diverged in epoch {epoch}: {exc}") from exc
            adam_step(store, grads, cfg.lr, max_grad_norm=cfg.max_grad_norm)
            tot_e += le.item() * len(idx)
            tot_h += lh.item() * len(idx)
        curve_e.append(tot_e / len(order))
        curve_h.append(tot_h / len(order))
        if not math.isfinite(curve_e[-1]):
            raise AgentError(f"behaviour cloning loss not finite at epoch {epoch}")
    store.reset_optimizer()
    return BCResult(policy, curve_e, curve_h)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Rollout:
    """Flattened on-policy transitions, ordered by episode then step."""

    windows: np.ndarray  # [N, m, 3]
    actions: np.ndarray  # raw Gaussian samples (before clipping)
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    episode: np.ndarray  # row in the episode batch
    t: np.ndarray
    lengths: np.ndarray
    pv: np.ndarray  # terminal PV per episode
    consumed: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    def padded(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((len(self.lengths), int(self.lengths.max())))
        out[self.episode, self.t] = x
        return out


EnvFactory = Callable[[int, np.random.Generator], EpisodeBatch]


def _make_env(episodes) -> BatchHedgeEnv:
    return episodes if hasattr(episodes, "step") and hasattr(episodes, "lengths") else BatchHedgeEnv(episodes)


def collect_rollouts(
    env,
    policy: PolicyNet,
    value: ValueNet | None,
    rng: np.random.Generator | None,
    *,
    deterministic: bool = False,
) -> Rollout:
    """Run every episode of ``env`` (an EpisodeBatch or batch environment) to completion.

    Actions are drawn from N(mu, sigma^2) and clipped by the environment; the
    recorded log-probability is that of the unclipped draw. With
    ``deterministic`` the policy mean is played instead.
    """
    env = _make_env(env)
    lengths = np.asarray(env.lengths)
    B, T, m = len(lengths), int(lengths.max()), policy.cfg.frames
    obs = env.reset()
    history = np.empty((B, T + 1, obs.shape[1]))
    history[:, 0] = obs
    win = np.empty((B, T, m, obs.shape[1]))
    acts = np.zeros((B, T))
    logp = np.zeros((B, T))
    vals = np.zeros((B, T))
    rews = np.zeros((B, T))
    dones = np.zeros((B, T), dtype=bool)
    for t in range(T):
        w = stack_frames(history[:, : t + 1], m)
        win[:, t] = w
        mu, sigma = policy(w)
        if deterministic:
            a = mu
        else:
            a = mu + sigma * rng.standard_normal(B)
        acts[:, t] = a
        logp[:, t] = -np.log(sigma) - 0.5 * LOG_2PI - (a - mu) ** 2 / (2 * sigma**2)
        if value is not None:
            vals[:, t] = value(w)
        try:
            obs, r, finished = env.step(a)
        except ValueError as exc:
            raise AgentError(f"environment step {t} failed: {exc}") from exc
        history[:, t + 1] = obs
        rews[:, t] = r
        dones[:, t] = finished
    mask = np.arange(T)[None, :] < lengths[:, None]
    ep, tt = np.nonzero(mask)
    return Rollout(win[ep, tt], acts[ep, tt], logp[ep, tt], rews[ep, tt], vals[ep, tt], dones[ep, tt], ep, tt, lengths, np.asarray(env.pv).copy())


# ---------------------------------------------------------------------------
# advantages


def compute_gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """GAE for one trajectory; the value beyond the terminal step is 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must align")
    adv = np.zeros_like(rewards)
    nxt_adv, nxt_val = 0.0, 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * nxt_val - values[t]
        nxt_adv = delta + gamma * lam * nxt_adv
        adv[t] = nxt_adv
        nxt_val = values[t]
    return adv


def rollout_advantages(roll: Rollout, gamma: float, lam: float) -> np.ndarray:
    """GAE for every trajectory in a rollout, vectorised across episodes."""
    R, V = roll.padded(roll.rewards), roll.padded(roll.values)
    B, T = R.shape
    live = np.arange(T)[None, :] < roll.lengths[:, None]
    adv = np.zeros((B, T))
    nxt_adv, nxt_val = np.zeros(B), np.zeros(B)
    for t in range(T - 1, -1, -1):
        delta = R[:, t] + gamma * nxt_val - V[:, t]
        cur = delta + gamma * lam * nxt_adv
        nxt_adv = np.where(live[:, t], cur, 0.0)
        nxt_val = np.where(live[:, t], V[:, t], 0.0)
        adv[:, t] = nxt_adv
    return adv[roll.episode, roll.t]


def value_targets(advantages, values) -> np.ndarray:
    """Lambda-return targets V(s_t) + A_t."""
    advantages = np.asarray(advantages, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if advantages.shape != values.shape:
        raise ValueError("advantages and values must align")
    return values + advantages


# ---------------------------------------------------------------------------
# updates


@dataclass
class UpdateStats:
    clip_fraction: float = 0.0
    approx_kl: float = 0.0
    entropy: float = 0.0
    actor_loss: float = 0.0
    critic_loss: float = 0.0


def ppo_surrogate(log_p_new: Tensor, log_p_old, adv, clip: float) -> tuple[Tensor, Tensor]:
    """Clipped surrogate loss -mean(min(rho A, clip(rho) A)) and the ratio rho."""
    ratio = dc.exp(log_p_new - log_p_old)
    unclipped = ratio * adv
    clipped = dc.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    return -dc.minimum(unclipped, clipped).mean(), ratio


def _normalise(adv: np.ndarray, on: bool) -> np.ndarray:
    if not on or len(adv) < 2:
        return adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def critic_update(value: ValueNet, windows, targets, epochs: int, cfg: TrainConfig, rng: np.random.Generator) -> float:
    last = 0.0
    for _ in range(epochs):
        order = rng.permutation(len(targets))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            with Graph() as g:
                loss = dc.square(value.forward(windows[idx]) - targets[idx]).mean()
            grads = backward(loss, g, value.store)
            adam_step(value.store, grads, cfg.lr_critic, max_grad_norm=cfg.max_grad_norm)
            last = loss.item()
    return last


def ppo_update(roll: Rollout, policy: PolicyNet, value: ValueNet, cfg: TrainConfig, rng: np.random.Generator, *, actor: bool = True) -> UpdateStats:
    """Clipped-PPO actor epochs followed by critic regression onto lambda-returns, in place."""
    adv_raw = rollout_advantages(roll, cfg.gamma, cfg.lam)
    targets = value_targets(adv_raw, roll.values)
    adv = _normalise(adv_raw, cfg.normalize_advantages)
    stats = UpdateStats()
    n_clip = n_seen = 0
    kl_sum = ent_sum = 0.0
    if actor:
        for _ in range(cfg.n_actor_update):
            order = rng.permutation(len(roll))
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                try:
                    with Graph() as g:
                        mu, sigma = policy.forward(roll.windows[idx])
                        logp = gaussian_log_prob(roll.actions[idx], mu, sigma)
                        surr, ratio = ppo_surrogate(logp, roll.log_probs[idx], adv[idx], cfg.clip)
                        ent = entropy_loss(sigma)
                        loss = surr + cfg.entropy_weight * ent
                    grads = backward(loss, g, policy.store)
                except NonFiniteError as exc:
                    diff = np.max(np.abs(roll.log_probs[idx]))
                    raise AgentError(f"non-finite likelihood ratio rejected the batch (max |old log-prob| {diff:.3g}): {exc}") from exc
                adam_step(policy.store, grads, cfg.lr_actor, max_grad_norm=cfg.max_grad_norm)
                n_clip += int(np.sum(np.abs(ratio.data - 1.0) > cfg.clip))
                n_seen += len(idx)
                kl_sum += float(np.sum(roll.log_probs[idx] - logp.data))
                ent_sum += -ent.item() * len(idx)
                stats.actor_loss = surr.item()
        stats.clip_fraction = n_clip / max(n_seen, 1)
        stats.approx_kl = kl_sum / max(n_seen, 1)
        stats.entropy = ent_sum / max(n_seen, 1)
    stats.critic_loss = critic_update(value, roll.windows, targets, cfg.n_critic_update, cfg, rng)
    roll.consumed = True
    return stats


def a2c_update(roll: Rollout, policy: PolicyNet, value: ValueNet, cfg: TrainConfig, rng: np.random.Generator) -> UpdateStats:
    """Single policy-gradient step on -mean(log pi(a|s) A) plus one critic epoch.

    The batch is spent afterwards; a second call on it is rejected.
    """
    if roll.consumed:
        raise AgentError("rollout already used for an update; A2C needs fresh on-policy samples")
    adv_raw = rollout_advantages(roll, cfg.gamma, cfg.lam)
    targets = value_targets(adv_raw, roll.values)
    adv = _normalise(adv_raw, cfg.normalize_advantages)
    try:
        with Graph() as g:
            mu, sigma = policy.forward(roll.windows)
            loss = -(gaussian_log_prob(roll.actions, mu, sigma) * adv).mean()
        grads = backward(loss, g, policy.store)
    except NonFiniteError as exc:
        raise AgentError(f"A2C batch rejected: {exc}") from exc
    adam_step(policy.store, grads, cfg.lr_actor, max_grad_norm=cfg.max_grad_norm)
    stats = UpdateStats(actor_loss=loss.item(), entropy=float(np.mean(0.5 * (LOG_2PI + 1) + np.log(sigma.data))))
    stats.critic_loss = critic_update(value, roll.windows, targets, 1, cfg, rng)
    roll.consumed = True
    return stats


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class EpochReport:
    epoch: int
    avg_r: float
    avg_pv: float
    std_pv: float
    clip_fraction: float
    entropy: float


@dataclass
class FinetuneResult:
    policy: PolicyNet
    value: ValueNet
    report: list[EpochReport]
    best_epoch: int
    aborted: str | None = None

    def write_report(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "avg_r", "avg_PV", "std_PV", "clip_fraction", "entropy"])
            for r in self.report:
                w.writerow([r.epoch, f"{r.avg_r:.10g}", f"{r.avg_pv:.10g}", f"{r.std_pv:.10g}", f"{r.clip_fraction:.6g}", f"{r.entropy:.6g}"])


def evaluate_policy(policy: PolicyNet, episodes: EpisodeBatch) -> np.ndarray:
    """Terminal PV of every episode when the policy mean is played."""
    return collect_rollouts(episodes, policy, None, None, deterministic=True).pv


def finetune(
    make_episodes: EnvFactory,
    policy: PolicyNet,
    value: ValueNet | None,
    cfg: TrainConfig,
    rng: np.random.Generator,
    *,
    updater: str = "ppo",
    log: Callable[[str], None] | None = None,
) -> FinetuneResult:
    """Collect, estimate advantages, update; keep the best policy on a frozen validation set.

    Epoch 0 in the report is the starting policy, so zero epochs returns it
    unchanged and later epochs only replace it when validation improves.
    """
    if updater not in ("ppo", "a2c"):
        raise ValueError(f"unknown updater {updater!r}")
    policy = policy.copy()
    value = value.copy() if value is not None else ValueNet(policy.cfg, np.random.default_rng(rng.integers(2**32)))
    validation = make_episodes(cfg.n_validation, np.random.default_rng(cfg.validation_seed))

    def score(p: PolicyNet) -> np.ndarray:
        return evaluate_policy(p, validation)

    pv = score(policy)
    best_r = -float(np.mean(pv**2))
    best = policy.copy()
    report = [EpochReport(0, best_r, float(pv.mean()), float(pv.std(ddof=1)), 0.0, 0.0)]
    best_epoch, aborted = 0, None
    for epoch in range(1, cfg.epochs + 1):
        try:
            roll = collect_rollouts(make_episodes(cfg.n_path, rng), policy, value, rng)
            if updater == "ppo":
                stats = ppo_update(roll, policy, value, cfg, rng, actor=epoch > cfg.critic_warmup)
            elif epoch > cfg.critic_warmup:
                stats = a2c_update(roll, policy, value, cfg, rng)
            else:
                stats = ppo_update(roll, policy, value, cfg, rng, actor=False)
            pv = score(policy)
        except (AgentError, NonFiniteError) as exc:
            aborted = f"epoch {epoch}: {exc}"
            break
        avg_r = -float(np.mean(pv**2))
        report.append(EpochReport(epoch, avg_r, float(pv.mean()), float(pv.std(ddof=1)), stats.clip_fraction, stats.entropy))
        if log:
            log(f"epoch {epoch} avg_r={avg_r:.6f} clip={stats.clip_fraction:.3f}")
        if avg_r > best_r:
            best_r, best, best_epoch = avg_r, policy.copy(), epoch
    return FinetuneResult(best, value, report, best_epoch, aborted)


def save_agent(directory: str | Path, policy: PolicyNet, value: ValueNet | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    policy.store.save(directory / "policy.ckpt")
    if value is not None:
        value.store.save(directory / "value.ckpt")
    (directory / "net.json").write_text(json.dumps(asdict(policy.cfg), sort_keys=True, indent=2) + "\n")


def load_agent(directory: str | Path) -> tuple[PolicyNet, ValueNet | None]:
    directory = Path(directory)
    cfg = NetConfig(**json.loads((directory / "net.json").read_text()))
    policy = PolicyNet(cfg, store=ParamStore.load(directory / "policy.ckpt"))
    vpath = directory / "value.ckpt"
    value = ValueNet(cfg, store=ParamStore.load(vpath)) if vpath.exists() else None
    return policy, value
