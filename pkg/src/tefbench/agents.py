"""Random baseline and a from-scratch PPO (clipped objective, GAE, Adam).

Actor and critic are separate tanh MLPs (obs -> 64 -> 64 -> out) with
orthogonal init. All gradients are computed manually in numpy and are
finite-difference checked in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .env import N_ACTIONS, ActionId, MutationEnv
from .errors import ExhaustedCorpus, NonFiniteLoss

HIDDEN = (64, 64)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.854
    learning_rate: float = 0.00138
    max_grad_norm: float = 0.4284
    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    epochs_per_update: int = 10
    minibatch: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    rollout_horizon: int = 2048


@dataclass
class PolicyParams:
    actor: dict[str, np.ndarray]
    critic: dict[str, np.ndarray]

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.actor.items()},
                            {k: v.copy() for k, v in self.critic.items()})


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _init_mlp(rng: np.random.Generator, n_in: int, n_out: int, out_gain: float):
    sizes = (n_in,) + HIDDEN + (n_out,)
    gains = (np.sqrt(2.0), np.sqrt(2.0), out_gain)
    params = {}
    for i in range(3):
        params[f"W{i + 1}"] = _orthogonal(rng, (sizes[i], sizes[i + 1]), gains[i])
        params[f"b{i + 1}"] = np.zeros(sizes[i + 1])
    return params


def init_policy(n_features: int = 128, n_actions: int = N_ACTIONS,
                seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng([seed, 0xAC7])
    actor = _init_mlp(rng, n_features, n_actions, 0.01)
    critic = _init_mlp(rng, n_features, 1, 1.0)
    return PolicyParams(actor, critic)


def _mlp_forward(params: dict[str, np.ndarray], X: np.ndarray):
    z1 = X @ params["W1"] + params["b1"]
    a1 = np.tanh(z1)
    z2 = a1 @ params["W2"] + params["b2"]
    a2 = np.tanh(z2)
    out = a2 @ params["W3"] + params["b3"]
    return out, (X, a1, a2)


def _mlp_backward(params: dict[str, np.ndarray], cache, dout: np.ndarray):
    X, a1, a2 = cache
    grads = {"W3": a2.T @ dout, "b3": dout.sum(axis=0)}
    da2 = dout @ params["W3"].T
    dz2 = da2 * (1.0 - a2 * a2)
    grads["W2"] = a1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ params["W2"].T
    dz1 = da1 * (1.0 - a1 * a1)
    grads["W1"] = X.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def action_distribution(policy: PolicyParams, obs: np.ndarray) -> np.ndarray:
    logits, _ = _mlp_forward(policy.actor, np.atleast_2d(obs))
    return np.exp(_log_softmax(logits))[0]


def sample_action(policy: PolicyParams, obs: np.ndarray, rng: np.random.Generator,
                  greedy: bool = False) -> tuple[int, float, float]:
    """Returns (action, log_prob, value); greedy mode breaks ties by lowest index."""
    obs2 = np.atleast_2d(obs)
    logits, _ = _mlp_forward(policy.actor, obs2)
    logp = _log_softmax(logits)[0]
    probs = np.exp(logp)
    if greedy:
        action = int(np.argmax(probs))
    else:
        action = int(np.searchsorted(np.cumsum(probs), rng.random()))
        action = min(action, probs.size - 1)
    value, _ = _mlp_forward(policy.critic, obs2)
    return action, float(logp[action]), float(value[0, 0])


def random_policy(obs: np.ndarray, rng: np.random.Generator) -> int:
    """Uniform over the action space, independent of the observation."""
    return int(rng.integers(0, N_ACTIONS))


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        gamma: float, lam: float) -> np.ndarray:
    """delta_t = r_t + gamma*v_{t+1}*(1-done_t) - v_t, accumulated with gamma*lam.

    The value beyond the end of the buffer bootstraps as zero.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    adv = np.zeros(T)
    last = 0.0
    for t in range(T - 1, -1, -1):
        next_value = values[t + 1] if t + 1 < T else 0.0
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv


@dataclass
class RolloutBuffer:
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def add(self, obs, action, reward, done, log_prob, value) -> None:
        self.observations.append(obs)
        self.actions.append(int(action))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))

    def __len__(self) -> int:
        return len(self.actions)

    def finalize(self, gamma: float, lam: float) -> None:
        """Compute GAE advantages and returns, then normalize the advantages."""
        values = np.array(self.values)
        raw = gae(np.array(self.rewards), values, np.array(self.dones, dtype=float),
                  gamma, lam)
        self.returns = raw + values
        std = raw.std()
        self.advantages = (raw - raw.mean()) / std if std > 1e-8 else raw - raw.mean()

    def batch(self) -> dict[str, np.ndarray]:
        if self.advantages is None:
            raise ValueError("finalize() must run before batching")
        return {
            "obs": np.stack(self.observations),
            "actions": np.array(self.actions, dtype=np.int64),
            "old_log_probs": np.array(self.log_probs),
            "advantages": self.advantages,
            "returns": self.returns,
        }


def ppo_loss_and_grads(policy: PolicyParams, batch: dict[str, np.ndarray], cfg: PpoConfig):
    """Clipped-surrogate + value + entropy loss with manual gradients."""
    obs = batch["obs"]
    actions = batch["actions"]
    old_logp = batch["old_log_probs"]
    adv = batch["advantages"]
    rets = batch["returns"]
    B = obs.shape[0]

    logits, actor_cache = _mlp_forward(policy.actor, obs)
    logp_all = _log_softmax(logits)
    probs = np.exp(logp_all)
    logp_a = logp_all[np.arange(B), actions]
    ratio = np.exp(logp_a - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon)
    objective = np.minimum(ratio * adv, clipped * adv)
    policy_loss = -objective.mean()

    values, critic_cache = _mlp_forward(policy.critic, obs)
    v = values[:, 0]
    value_loss = np.mean((v - rets) ** 2)

    entropy = -(probs * logp_all).sum(axis=1)
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy.mean()

    # gradient of the clipped surrogate w.r.t. logits: flows only where the
    # unclipped branch is active
    active = np.where(adv >= 0, ratio <= 1.0 + cfg.clip_epsilon,
                      ratio >= 1.0 - cfg.clip_epsilon)
    coef = -(adv * ratio * active) / B
    dlogits = coef[:, None] * (np.eye(probs.shape[1])[actions] - probs)
    if cfg.entropy_coef != 0.0:
        dlogits += cfg.entropy_coef / B * probs * (logp_all + entropy[:, None])
    actor_grads = _mlp_backward(policy.actor, actor_cache, dlogits)

    dv = (cfg.value_coef * 2.0 * (v - rets) / B)[:, None]
    critic_grads = _mlp_backward(policy.critic, critic_cache, dv)

    stats = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_epsilon)),
    }
    return float(loss), actor_grads, critic_grads, stats


def global_grad_norm(grads_list: list[dict[str, np.ndarray]]) -> float:
    total = 0.0
    for grads in grads_list:
        for g in grads.values():
            total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_grads(grads_list: list[dict[str, np.ndarray]], max_norm: float) -> float:
    """Scale all gradients in place so the global norm is at most max_norm."""
    norm = global_grad_norm(grads_list)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for grads in grads_list:
            for k in grads:
                grads[k] = grads[k] * scale
    return norm


class AdamState:
    """Adaptive-moment update: m/v accumulators with bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params_list: list[dict[str, np.ndarray]],
             grads_list: list[dict[str, np.ndarray]], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for tag, (params, grads) in enumerate(zip(params_list, grads_list)):
            for k, g in grads.items():
                key = f"{tag}:{k}"
                if key not in self.m:
                    self.m[key] = np.zeros_like(g)
                    self.v[key] = np.zeros_like(g)
                self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
                self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
                mhat = self.m[key] / bc1
                vhat = self.v[key] / bc2
                params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)


def ppo_update(policy: PolicyParams, buffer: RolloutBuffer, cfg: PpoConfig,
               opt: AdamState | None = None,
               rng: np.random.Generator | None = None) -> tuple[PolicyParams, dict]:
    """Runs epochs x minibatches of clipped-PPO on the buffer, in place.

    A non-finite loss restores the entry parameters and raises NonFiniteLoss.
    """
    if opt is None:
        opt = AdamState()
    if rng is None:
        rng = np.random.default_rng(0)
    if buffer.advantages is None:
        buffer.finalize(cfg.gamma, cfg.gae_lambda)
    data = buffer.batch()
    n = len(buffer)
    snapshot = policy.copy()
    stats_acc: dict[str, list[float]] = {}
    try:
        for _ in range(cfg.epochs_per_update):
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                idx = order[start:start + cfg.minibatch]
                batch = {k: v[idx] for k, v in data.items()}
                loss, ag, cg, stats = ppo_loss_and_grads(policy, batch, cfg)
                if not np.isfinite(loss):
                    raise NonFiniteLoss(f"loss became {loss}")
                pre_norm = clip_grads([ag, cg], cfg.max_grad_norm)
                opt.step([policy.actor, policy.critic], [ag, cg], cfg.learning_rate)
                stats["grad_norm"] = pre_norm
                for k, val in stats.items():
                    stats_acc.setdefault(k, []).append(val)
    except NonFiniteLoss:
        policy.actor = snapshot.actor
        policy.critic = snapshot.critic
        raise
    summary = {k: float(np.mean(v)) for k, v in stats_acc.items()}
    summary["n_samples"] = n
    return policy, summary


def save_policy(path, policy: PolicyParams, meta: dict | None = None) -> None:
    from .models.store import KIND_POLICY, save_container
    arrays = {f"actor_{k}": v for k, v in policy.actor.items()}
    arrays.update({f"critic_{k}": v for k, v in policy.critic.items()})
    save_container(path, KIND_POLICY, meta or {}, arrays)


def load_policy(path) -> tuple[PolicyParams, dict]:
    from .errors import MissingArtifacts
    from .models.store import KIND_POLICY, load_container
    kind, meta, arrays = load_container(path)
    if kind != KIND_POLICY:
        raise MissingArtifacts(f"{path} holds a {kind} model, not a policy")
    actor = {k[len("actor_"):]: v for k, v in arrays.items() if k.startswith("actor_")}
    critic = {k[len("critic_"):]: v for k, v in arrays.items() if k.startswith("critic_")}
    return PolicyParams(actor, critic), meta


STATS_COLUMNS = ("update", "policy_loss", "value_loss", "entropy", "clip_fraction",
                 "grad_norm", "mean_episode_reward", "n_samples")


def save_training_stats(path, stats: list[dict]) -> None:
    """Per-update training statistics as CSV."""
    import csv
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=STATS_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for i, row in enumerate(stats):
            writer.writerow({"update": i, **{k: row.get(k, "") for k in STATS_COLUMNS
                                             if k != "update"}})


def collect_rollout(env: MutationEnv, policy: PolicyParams, n_steps: int,
                    binaries: Iterator, rng: np.random.Generator,
                    greedy: bool = False) -> RolloutBuffer:
    """Collect exactly n_steps transitions, rolling episodes over the iterator.

    Skipped episodes (initially benign binaries) consume a binary but add no
    transition. Raises ExhaustedCorpus when the iterator runs dry.
    """
    buffer = RolloutBuffer()
    while len(buffer) < n_steps:
        if env.state is None or env.state.done:
            try:
                source = next(binaries)
            except StopIteration:
                raise ExhaustedCorpus("binary iterator is exhausted") from None
            env.reset(source)
            continue
        obs = env.observation
        action, logp, value = sample_action(policy, obs, rng, greedy=greedy)
        rec = env.step(ActionId(action))
        buffer.add(obs, action, rec.reward, rec.done, logp, value)
    return buffer
