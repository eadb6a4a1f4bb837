"""Alternating target-query collection, surrogate training, surrogate-side policy
improvement, and target evaluation, under a hard query budget; plus the
evasion/agreement metrics.

Phase accounting: the initial policy training and each non-final round's
evaluation consume exactly ``n`` target queries each (resets included), so the
ledger reads ``k * n`` when training ends. The final round evaluates the test
set instead and is excluded from the budget.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import features as feat
from .agents import (
    AdamState,
    PolicyParams,
    PpoConfig,
    RolloutBuffer,
    collect_rollout,
    init_policy,
    ppo_update,
    random_policy,
    sample_action,
    save_policy,
    save_training_stats,
)
from .corpus import BENIGN, CorpusSplits, load_ingredients
from .env import ActionId, CaptureBuffer, MutationEnv, StepLogger
from .errors import (
    BudgetExceeded,
    EmptyEvaluation,
    KTooLarge,
    SurrogateDegenerate,
    TimedOut,
)
from .models import (
    Detector,
    GbdtConfig,
    calibrate_threshold,
    global_importance,
    save_model,
    train_gbdt,
)
from .tbf import parse


def _default_surrogate_cfg() -> GbdtConfig:
    return GbdtConfig(num_boosting_rounds=60, learning_rate=0.05, num_leaves=64,
                      max_depth=15, min_child_samples=5, feature_fraction=1.0)


@dataclass(frozen=True)
class MemeConfig:
    n: int = 1024                 # target interaction queries per phase
    k: int = 2                    # rounds
    m: int = 2048                 # surrogate-environment steps per round
    alpha: float = 1.26           # sample-weight multiplier on D_sur rows
    query_budget: int = 2048
    max_turns: int = 15
    surrogate: GbdtConfig = field(default_factory=_default_surrogate_cfg)
    surrogate_horizon: int = 1024
    dedupe_dsur: bool = False
    eval_greedy: bool = True
    importance_sample: int = 192

    def __post_init__(self):
        if self.n < 0 or self.k <= 0 or self.m <= 0:
            raise ValueError(f"k and m must be positive and n non-negative, "
                             f"got n={self.n} k={self.k} m={self.m}")


@dataclass
class SurrogateDataset:
    X_sur: np.ndarray
    y_sur: np.ndarray
    X_aux: np.ndarray
    y_aux: np.ndarray


@dataclass
class EvasionReport:
    n_tested: int
    n_detected: int
    n_evaded: int
    evasion_rate: float
    mean_modifications: float
    partial: bool = False
    wall_clock: float = 0.0

    def row(self) -> dict:
        return {"n_tested": self.n_tested, "n_detected": self.n_detected,
                "n_evaded": self.n_evaded, "evasion_rate": self.evasion_rate,
                "mean_modifications": self.mean_modifications, "partial": self.partial}


@dataclass
class AgreementReport:
    label_agreement: float
    feature_agreement_10: float
    feature_agreement_20: float


@dataclass
class MemeResult:
    policy: PolicyParams
    surrogate: Detector
    evasion: EvasionReport
    agreement: AgreementReport | None
    telemetry: dict


# --- metrics -----------------------------------------------------------------


def label_agreement(f: Detector, g: Detector, X_test: np.ndarray) -> float:
    """Fraction of identical hard labels; ledger-exempt on both detectors."""
    X_test = np.atleast_2d(X_test)
    if X_test.shape[0] == 0:
        raise ValueError("X_test must be non-empty")
    return float(np.mean(f.labels_unmetered(X_test) == g.labels_unmetered(X_test)))


def feature_agreement(order_t: Sequence[int], order_s: Sequence[int], k: int) -> float:
    """|top_k(target) & top_k(surrogate)| / k."""
    if k > len(order_t) or k > len(order_s):
        raise KTooLarge(f"k={k} exceeds ranking lengths {len(order_t)}/{len(order_s)}")
    return len(set(order_t[:k]) & set(order_s[:k])) / k


def evasion_rate(episodes: Sequence[dict], max_turns: int,
                 partial: bool = False, wall_clock: float = 0.0) -> EvasionReport:
    """E = n_evaded / n_detected; non-evasive episodes count max_turns moves."""
    detected = [e for e in episodes if e["detected"]]
    if not detected:
        raise EmptyEvaluation("no initially detected binaries in the evaluation")
    n_ev = sum(1 for e in detected if e["evaded"])
    mods = [e["turns"] if e["evaded"] else max_turns for e in detected]
    return EvasionReport(
        n_tested=len(episodes), n_detected=len(detected), n_evaded=n_ev,
        evasion_rate=n_ev / len(detected),
        mean_modifications=float(np.mean(mods)),
        partial=partial, wall_clock=wall_clock)


# --- surrogate training --------------------------------------------------------


def train_surrogate(dataset: SurrogateDataset, alpha: float,
                    trainer_cfg: GbdtConfig, fpr_target: float | None,
                    calib_fraction: float = 0.6, seed: int = 0) -> tuple[Detector, dict]:
    """GBDT on D_sur (weight alpha) + D_aux (weight 1), FPR-calibrated threshold.

    A slice of the aux benign rows is held out of training for calibration;
    without a usable holdout the threshold falls back to 0.5.
    """
    n_sur = dataset.X_sur.shape[0]
    n_aux = dataset.X_aux.shape[0]
    if n_sur + n_aux == 0:
        raise SurrogateDegenerate("no surrogate training data at all")

    rng = np.random.default_rng([seed, 0x5D2])
    calib_idx = np.zeros(n_aux, dtype=bool)
    if fpr_target is not None and n_aux:
        benign_rows = np.flatnonzero(dataset.y_aux == BENIGN)
        # keep at least 100 benign rows on each side of the split
        n_hold = max(100, int(len(benign_rows) * calib_fraction))
        if len(benign_rows) - n_hold >= 100:
            hold = rng.permutation(benign_rows)[:n_hold]
            calib_idx[hold] = True

    X_parts = [dataset.X_sur, dataset.X_aux[~calib_idx]]
    y_parts = [dataset.y_sur, dataset.y_aux[~calib_idx]]
    w_parts = [np.full(n_sur, float(alpha)), np.ones(int((~calib_idx).sum()))]
    X = np.vstack([p for p in X_parts if p.shape[0]])
    y = np.concatenate([p for p in y_parts if p.shape[0]]).astype(np.float64)
    w = np.concatenate([p for p in w_parts if p.shape[0]])
    classes = np.unique(y)
    if classes.size < 2:
        raise SurrogateDegenerate(f"single-class surrogate dataset (labels {classes})")

    model = train_gbdt(X, y, trainer_cfg, sample_weight=w)
    if fpr_target is not None and calib_idx.any():
        threshold = calibrate_threshold(model, dataset.X_aux[calib_idx], fpr_target)
    else:
        threshold = 0.5
    info = {"rows_sur": int(n_sur), "rows_aux_train": int((~calib_idx).sum()),
            "rows_calibration": int(calib_idx.sum()), "threshold": float(threshold)}
    return Detector(model, threshold, name="surrogate"), info


# --- rollout/evaluation helpers ---------------------------------------------------


def _check_deadline(deadline: float | None) -> None:
    if deadline is not None and time.monotonic() > deadline:
        raise TimedOut("wall-clock limit reached")


def cycling_paths(entries: Sequence, root: str | Path, seed: int) -> Iterator[Path]:
    """Endless reshuffled stream of corpus paths."""
    root = Path(root)
    rng = np.random.default_rng([seed, 0xC1C])
    paths = [e[0] if isinstance(e, (tuple, list)) else e for e in entries]
    while True:
        for i in rng.permutation(len(paths)):
            yield root / paths[int(i)]


def collect_with_query_budget(env: MutationEnv, policy: PolicyParams | None,
                              max_queries: int, binaries: Iterator,
                              rng: np.random.Generator, greedy: bool = False,
                              buffer: RolloutBuffer | None = None,
                              episodes: list | None = None,
                              deadline: float | None = None) -> int:
    """Run resets/steps until exactly max_queries detector queries are spent."""
    used = 0
    current: dict | None = None
    uniform_logp = -float(np.log(len(ActionId)))
    while used < max_queries:
        _check_deadline(deadline)
        if env.state is None or env.state.done:
            source = next(binaries)
            _, detected = env.reset(source)
            used += 1
            current = {"binary": str(source), "detected": bool(detected),
                       "evaded": False, "turns": 0}
            if episodes is not None:
                episodes.append(current)
            continue
        obs = env.observation
        if policy is None:
            action, logp, value = random_policy(obs, rng), uniform_logp, 0.0
        else:
            action, logp, value = sample_action(policy, obs, rng, greedy=greedy)
        rec = env.step(ActionId(action))
        used += 1
        if buffer is not None:
            buffer.add(obs, action, rec.reward, rec.done, logp, value)
        if current is not None:
            current["turns"] = env.state.turn
            current["evaded"] = env.state.evaded
    return used


def evaluate_policy(env: MutationEnv, policy: PolicyParams | None,
                    binaries: Sequence[Path], rng: np.random.Generator,
                    greedy: bool = True, deadline: float | None = None) -> tuple[list[dict], bool]:
    """Complete episodes over a fixed binary list; returns (episodes, partial)."""
    episodes: list[dict] = []
    for path in binaries:
        if deadline is not None and time.monotonic() > deadline:
            return episodes, True
        _, detected = env.reset(path)
        ep = {"binary": str(path), "detected": bool(detected), "evaded": False, "turns": 0}
        episodes.append(ep)
        if not detected:
            continue
        while not env.state.done:
            obs = env.observation
            if policy is None:
                action = random_policy(obs, rng)
            else:
                action, _, _ = sample_action(policy, obs, rng, greedy=greedy)
            env.step(ActionId(action))
        ep["turns"] = env.state.turn
        ep["evaded"] = env.state.evaded
    return episodes, False


def _train_on_buffer(policy: PolicyParams, buffer: RolloutBuffer, ppo_cfg: PpoConfig,
                     opt: AdamState, rng: np.random.Generator, stats: list) -> None:
    if len(buffer) < 2:
        return
    buffer.finalize(ppo_cfg.gamma, ppo_cfg.gae_lambda)
    _, s = ppo_update(policy, buffer, ppo_cfg, opt, rng)
    n_episodes = max(1, int(np.sum(buffer.dones)))
    s["mean_episode_reward"] = float(np.sum(buffer.rewards)) / n_episodes
    stats.append(s)


def agreement_report(target: Detector, surrogate: Detector, X_eval: np.ndarray,
                     importance_sample: int = 192, seed: int = 0) -> AgreementReport:
    rng = np.random.default_rng([seed, 0xA6E])
    idx = rng.permutation(X_eval.shape[0])[:importance_sample]
    Xs = X_eval[idx]
    order_t, _ = global_importance(target.model, Xs, seed=seed)
    order_s, _ = global_importance(surrogate.model, Xs, seed=seed)
    return AgreementReport(
        label_agreement=label_agreement(target, surrogate, X_eval),
        feature_agreement_10=feature_agreement(order_t, order_s, 10),
        feature_agreement_20=feature_agreement(order_t, order_s, 20),
    )


# --- the MEME loop -------------------------------------------------------------


def features_of(splits_entries: Sequence[tuple[str, int]], root: str | Path,
                label_filter: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    X, y = [], []
    for rel, label in splits_entries:
        if label_filter is not None and label != label_filter:
            continue
        X.append(feat.extract_features(parse((root / rel).read_bytes())))
        y.append(label)
    return np.stack(X), np.array(y, dtype=np.int64)


def run_meme(cfg: MemeConfig, target: Detector, splits: CorpusSplits, seed: int = 0,
             ppo_cfg: PpoConfig | None = None, fpr_target: float | None = 0.01,
             aux_data: tuple[np.ndarray, np.ndarray] | None = None,
             eval_data: tuple[np.ndarray, np.ndarray] | None = None,
             out_dir: str | Path | None = None,
             deadline: float | None = None) -> MemeResult:
    """Algorithm: initial on-target PPO training, then k rounds of surrogate
    training / surrogate-side PPO / on-target evaluation; the final round
    evaluates the attack test split outside the query budget.
    """
    t_start = time.monotonic()
    ppo_cfg = ppo_cfg or PpoConfig()
    planned = cfg.k * cfg.n
    if planned > cfg.query_budget:
        raise BudgetExceeded(f"plan needs {planned} target queries, budget {cfg.query_budget}")

    root = Path(splits.root)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    ingredients = load_ingredients(splits)
    if aux_data is None:
        aux_data = features_of(splits.aux, root)
    if eval_data is None:
        eval_data = features_of(splits.eval, root)
    X_aux, y_aux = aux_data

    capture = CaptureBuffer()
    step_logger = StepLogger() if out_dir is not None else None
    env = MutationEnv(target, ingredients, cfg.max_turns, seed=seed, capture=capture,
                      step_logger=step_logger)
    sur_rng = np.random.default_rng([seed, 0x5E0])
    upd_rng = np.random.default_rng([seed, 0x0DD])
    policy = init_policy(seed=seed)
    opt = AdamState()

    train_iter = cycling_paths(splits.attack_train, root, seed)
    eval_malicious = [e for e in splits.eval if e[1] == 1]
    eval_iter = cycling_paths(eval_malicious, root, seed + 101)

    ledger_start = target.queries
    update_stats: list[dict] = []
    telemetry: dict = {"phases": []}

    def spent() -> int:
        return target.queries - ledger_start

    # initial training phase against the real target (n queries)
    remaining = cfg.n
    while remaining > 0:
        chunk = min(cfg.surrogate_horizon, remaining)
        buf = RolloutBuffer()
        collect_with_query_budget(env, policy, chunk, train_iter, sur_rng,
                                  buffer=buf, deadline=deadline)
        _train_on_buffer(policy, buf, ppo_cfg, opt, upd_rng, update_stats)
        remaining -= chunk
    telemetry["phases"].append({"phase": "initial_train", "queries": spent(),
                                "dsur": len(capture)})

    surrogate: Detector | None = None
    sur_info: dict = {}
    final_episodes: list[dict] = []
    final_partial = False
    training_queries = spent()

    for round_i in range(1, cfg.k + 1):
        X_sur, y_sur = capture.arrays()
        if cfg.dedupe_dsur and X_sur.shape[0]:
            _, keep = np.unique(X_sur, axis=0, return_index=True)
            keep.sort()
            X_sur, y_sur = X_sur[keep], y_sur[keep]
        dataset = SurrogateDataset(X_sur, y_sur, X_aux, y_aux)
        sur_cfg = GbdtConfig(**{**asdict(cfg.surrogate),
                                "seed": cfg.surrogate.seed + 1000 * seed + round_i})
        surrogate, sur_info = train_surrogate(dataset, cfg.alpha, sur_cfg,
                                              fpr_target, seed=seed + round_i)
        if out_dir is not None:
            save_model(Path(out_dir) / f"surrogate_round{round_i}.tefm",
                       surrogate.model, surrogate.threshold)

        # improve the policy against the surrogate; no target queries here
        sur_env = MutationEnv(surrogate, ingredients, cfg.max_turns,
                              seed=seed + 7 * round_i, capture=None)
        steps_left = cfg.m
        while steps_left > 0:
            chunk = min(cfg.surrogate_horizon, steps_left)
            buf = collect_rollout(sur_env, policy, chunk, train_iter, sur_rng)
            _train_on_buffer(policy, buf, ppo_cfg, opt, upd_rng, update_stats)
            steps_left -= chunk
        telemetry["phases"].append({"phase": f"surrogate_train_{round_i}",
                                    "queries": spent(), "sur_steps": cfg.m})

        if round_i < cfg.k:
            episodes: list[dict] = []
            collect_with_query_budget(env, policy, cfg.n, eval_iter, sur_rng,
                                      greedy=cfg.eval_greedy, episodes=episodes,
                                      deadline=deadline)
            telemetry["phases"].append({"phase": f"eval_round_{round_i}",
                                        "queries": spent(), "episodes": len(episodes)})
            training_queries = spent()
        else:
            # final round: full test-set evaluation, excluded from the budget
            training_queries = spent()
            if training_queries > cfg.query_budget:
                raise BudgetExceeded(
                    f"training used {training_queries} > budget {cfg.query_budget}")
            test_paths = [root / p for p, _ in splits.attack_test]
            final_episodes, final_partial = evaluate_policy(
                env, policy, test_paths, sur_rng, greedy=cfg.eval_greedy,
                deadline=deadline)

    wall = time.monotonic() - t_start
    report = evasion_rate(final_episodes, cfg.max_turns, partial=final_partial,
                          wall_clock=wall)
    agreement = None
    if eval_data is not None and surrogate is not None:
        X_eval, _ = eval_data
        agreement = agreement_report(target, surrogate, X_eval,
                                     cfg.importance_sample, seed=seed)

    telemetry.update(
        training_queries=training_queries,
        total_queries=spent(),
        dsur_rows=len(capture),
        update_stats=update_stats,
        surrogate_info=sur_info,
        final_episodes=final_episodes,
        wall_clock=wall,
    )
    if out_dir is not None:
        out = Path(out_dir)
        save_policy(out / "policy.tefm", policy,
                    {"seed": seed, "n_actions": len(ActionId)})
        save_training_stats(out / "training_stats.csv", update_stats)
        capture.save(out / "dsur.bin")
        if step_logger is not None:
            step_logger.save(out / "steps.jsonl")
        with (out / "episodes.jsonl").open("w") as fh:
            for i, ep in enumerate(final_episodes):
                fh.write(json.dumps({"episode_id": i, **ep}, sort_keys=True) + "\n")
    return MemeResult(policy=policy, surrogate=surrogate, evasion=report,
                      agreement=agreement, telemetry=telemetry)
