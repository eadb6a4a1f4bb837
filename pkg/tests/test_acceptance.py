"""Acceptance suite: every criterion runs at its stated tolerance and reports
one pass/fail line (echoed in the pytest terminal summary).

The heavyweight fixtures (default corpus, calibrated targets, five seeded runs
of each attack method) are session-scoped and shared across criteria.
"""

import itertools
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from tefbench import tbf
from tefbench.agents import (
    AdamState,
    PpoConfig,
    RolloutBuffer,
    gae,
    init_policy,
    ppo_loss_and_grads,
)
from tefbench.cli import main as cli_main
from tefbench.corpus import (
    BENIGN,
    CorpusConfig,
    build_corpus,
    gen_binary,
    gen_fresh_benign,
    load_ingredients,
    load_splits,
)
from tefbench.env import ActionId, MutationEnv, N_ACTIONS, apply_action
from tefbench.features import extract_features
from tefbench.meme import (
    MemeConfig,
    collect_with_query_budget,
    cycling_paths,
    evaluate_policy,
    evasion_rate,
    features_of,
    run_meme,
    _train_on_buffer,
)
from tefbench.models import (
    Detector,
    FfnnConfig,
    GbdtConfig,
    LinearConfig,
    calibrate_threshold,
    loss_and_grad,
    train_ffnn,
    train_gbdt,
    train_linear,
    tree_shap,
)
from tefbench.models.ffnn import init_params

SEEDS = (0, 1, 2, 3, 4)
FPR_TARGET = 0.01


def criterion(number: int, description: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {description}"
    if detail:
        line += f" ({detail})"
    record_criterion(line)
    print(line)
    assert ok, line


# --- shared world -----------------------------------------------------------------


@dataclass
class World:
    root: Path
    cfg: CorpusConfig
    target: Detector
    target_threshold: float
    aux: tuple
    eval_data: tuple
    train_features: tuple


@pytest.fixture(scope="session")
def world(tmp_path_factory) -> World:
    root = tmp_path_factory.mktemp("acceptance_corpus")
    cfg = CorpusConfig()
    build_corpus(cfg, root)
    splits = load_splits(root, 0)
    X, y = features_of(splits.target_train, root)
    model = train_gbdt(X, y.astype(float), GbdtConfig(num_boosting_rounds=100, seed=0))
    Xb, _ = features_of(splits.eval, root, label_filter=BENIGN)
    threshold = calibrate_threshold(model, Xb, FPR_TARGET)
    target = Detector(model, threshold, name="gbdt")
    aux = features_of(splits.aux, root)
    eval_data = features_of(splits.eval, root)
    return World(root=root, cfg=cfg, target=target, target_threshold=threshold,
                 aux=aux, eval_data=eval_data, train_features=(X, y))


@pytest.fixture(scope="session")
def meme_runs(world):
    results = []
    for seed in SEEDS:
        splits = load_splits(world.root, seed)
        results.append(run_meme(MemeConfig(), world.target, splits, seed=seed,
                                ppo_cfg=PpoConfig(), fpr_target=FPR_TARGET,
                                aux_data=world.aux, eval_data=world.eval_data))
    return results


@pytest.fixture(scope="session")
def ppo_runs(world):
    reports = []
    for seed in SEEDS:
        splits = load_splits(world.root, seed)
        ingredients = load_ingredients(splits)
        ppo_cfg = PpoConfig()
        env = MutationEnv(world.target, ingredients, seed=seed)
        policy = init_policy(seed=seed)
        opt = AdamState()
        rng = np.random.default_rng([seed, 0xBB0])
        upd_rng = np.random.default_rng([seed, 0x0DD])
        train_iter = cycling_paths(splits.attack_train, world.root, seed)
        remaining = 2048
        while remaining > 0:
            chunk = min(ppo_cfg.rollout_horizon, 1024, remaining)
            buf = RolloutBuffer()
            collect_with_query_budget(env, policy, chunk, train_iter, rng, buffer=buf)
            _train_on_buffer(policy, buf, ppo_cfg, opt, upd_rng, [])
            remaining -= chunk
        eval_env = MutationEnv(world.target, ingredients, seed=seed + 5000)
        test_paths = [world.root / p for p, _ in splits.attack_test]
        episodes, _ = evaluate_policy(eval_env, policy,
                                      test_paths, np.random.default_rng([seed, 0xEE1]),
                                      greedy=True)
        reports.append(evasion_rate(episodes, 15))
    return reports


@pytest.fixture(scope="session")
def random_runs(world):
    reports = []
    for seed in SEEDS:
        splits = load_splits(world.root, seed)
        ingredients = load_ingredients(splits)
        env = MutationEnv(world.target, ingredients, seed=seed)
        test_paths = [world.root / p for p, _ in splits.attack_test]
        episodes, _ = evaluate_policy(env, None, test_paths,
                                      np.random.default_rng([seed, 0x44D]))
        reports.append(evasion_rate(episodes, 15))
    return reports


# --- criterion 1: format soundness --------------------------------------------------


def test_criterion_1_format_soundness(world):
    ingredients = load_ingredients(load_splits(world.root, 0))
    rng = np.random.default_rng(0xF0221)
    t0 = time.monotonic()
    roundtrip_ok = validity_ok = digest_ok = 0
    trials = 10_000
    for trial in range(trials):
        label = trial % 2
        b = gen_binary(label, 1_000_000 + trial, world.cfg)
        digest0 = tbf.functional_digest(b).value
        for _ in range(int(rng.integers(1, 16))):
            b = apply_action(b, ActionId(int(rng.integers(0, N_ACTIONS))),
                             ingredients, rng)
        raw = tbf.serialize(b)
        roundtrip_ok += tbf.serialize(tbf.parse(raw)) == raw
        validity_ok += tbf.validate(b).valid
        digest_ok += tbf.functional_digest(b).value == digest0
    elapsed = time.monotonic() - t0
    ok = (roundtrip_ok == trials and validity_ok == trials
          and digest_ok == trials and elapsed < 120.0)
    criterion(1, "format soundness over 10,000 fuzzed action sequences", ok,
              f"roundtrip {roundtrip_ok}/{trials}, valid {validity_ok}/{trials}, "
              f"digest {digest_ok}/{trials}, {elapsed:.0f}s")


# --- criterion 2: numerical kernels --------------------------------------------------


def _flat(params):
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def _set_flat(params, vec):
    off = 0
    for k in sorted(params):
        n = params[k].size
        params[k] = vec[off:off + n].reshape(params[k].shape)
        off += n


def _max_rel_error_ffnn(rng, n_configs=20):
    worst = 0.0
    for config in range(n_configs):
        act = "tanh" if config % 2 else "relu"
        params = init_params(6, np.random.default_rng(500 + config))
        X = rng.random((4, 6))
        y = rng.integers(0, 2, 4).astype(float)
        _, grads = loss_and_grad(params, X, y, None, act)
        eps = 1e-6
        for key in params:
            flat = params[key].reshape(-1)
            for idx in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + eps
                lp, _ = loss_and_grad(params, X, y, None, act)
                flat[idx] = orig - eps
                lm, _ = loss_and_grad(params, X, y, None, act)
                flat[idx] = orig
                fd = (lp - lm) / (2 * eps)
                an = grads[key].reshape(-1)[idx]
                worst = max(worst, abs(fd - an) / max(abs(fd) + abs(an), 1e-8))
    return worst


def _max_rel_error_ppo(rng, n_configs=20):
    worst = 0.0
    for trial in range(n_configs):
        policy = init_policy(n_features=9, n_actions=6, seed=trial)
        B = 8
        batch = {
            "obs": rng.normal(size=(B, 9)),
            "actions": rng.integers(0, 6, B),
            "old_log_probs": np.log(rng.random(B) * 0.5 + 0.05),
            "advantages": rng.normal(size=B),
            "returns": rng.normal(size=B),
        }
        cfg = PpoConfig(value_coef=float(rng.random() + 0.1),
                        entropy_coef=float(rng.random() * 0.1),
                        clip_epsilon=float(rng.uniform(0.1, 0.3)))
        _, ag, cg, _ = ppo_loss_and_grads(policy, batch, cfg)
        for net, grads in (("actor", ag), ("critic", cg)):
            params = getattr(policy, net)
            analytic = _flat(grads)
            base = _flat(params)
            eps = 1e-6
            for idx in rng.choice(base.size, size=10, replace=False):
                vec = base.copy()
                vec[idx] += eps
                _set_flat(params, vec)
                lp, *_ = ppo_loss_and_grads(policy, batch, cfg)
                vec[idx] -= 2 * eps
                _set_flat(params, vec)
                lm, *_ = ppo_loss_and_grads(policy, batch, cfg)
                _set_flat(params, base)
                fd = (lp - lm) / (2 * eps)
                worst = max(worst, abs(fd - analytic[idx])
                            / max(abs(fd) + abs(analytic[idx]), 1e-8))
    return worst


def _gae_recursion_oracle(r, v, d, gamma, lam):
    T = len(r)
    out = np.zeros(T)
    for t in range(T):
        acc, coef = 0.0, 1.0
        for k in range(t, T):
            next_v = v[k + 1] if k + 1 < T else 0.0
            acc += coef * (r[k] + gamma * next_v * (1 - d[k]) - v[k])
            if d[k]:
                break
            coef *= gamma * lam
        out[t] = acc
    return out


def test_criterion_2_numerical_kernels():
    rng = np.random.default_rng(0xC2)
    ffnn_err = _max_rel_error_ffnn(rng)
    ppo_err = _max_rel_error_ppo(rng)
    gae_err = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 48))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = (rng.random(T) < 0.25).astype(float)
        gamma, lam = rng.random(), rng.random()
        gae_err = max(gae_err, np.abs(
            gae(r, v, d, gamma, lam) - _gae_recursion_oracle(r, v, d, gamma, lam)).max())
    ok = ffnn_err < 1e-3 and ppo_err < 1e-3 and gae_err <= 1e-12
    criterion(2, "FFNN/PPO gradients vs finite differences; GAE vs recursion", ok,
              f"ffnn {ffnn_err:.2e}, ppo {ppo_err:.2e}, gae {gae_err:.2e}")


# --- criterion 3: tree-Shapley -------------------------------------------------------


def _conditional_expectation(tree, S, x):
    def walk(j):
        f = tree.feature[j]
        if f < 0:
            return tree.value[j]
        left, right = tree.left[j], tree.right[j]
        if f in S:
            return walk(left) if x[f] <= tree.threshold[j] else walk(right)
        lw, rw = tree.cover[left], tree.cover[right]
        return (walk(left) * lw + walk(right) * rw) / (lw + rw)
    return walk(0)


def _brute_force_shap(model, x, d):
    phi = np.zeros(d)
    for tree in model.trees:
        for i in range(d):
            others = [j for j in range(d) if j != i]
            for size in range(d):
                for S in itertools.combinations(others, size):
                    S = set(S)
                    weight = (math.factorial(len(S)) * math.factorial(d - len(S) - 1)
                              / math.factorial(d))
                    phi[i] += weight * (_conditional_expectation(tree, S | {i}, x)
                                        - _conditional_expectation(tree, S, x))
    return phi * model.shrinkage


def test_criterion_3_tree_shapley(world):
    X, y = world.train_features
    model = train_gbdt(X, y.astype(float),
                       GbdtConfig(num_boosting_rounds=30, num_leaves=15, max_depth=6))
    expected = model.expected_margin()
    samples = world.eval_data[0][:1000]
    local_err = 0.0
    for row in samples:
        phi = tree_shap(model, row)
        margin = model.predict_margin(row[None])[0]
        local_err = max(local_err, abs(phi.sum() + expected - margin))

    rng = np.random.default_rng(0xC3)
    X4 = rng.random((600, 4))
    y4 = (((X4[:, 0] > 0.5) ^ (X4[:, 1] > 0.3)) | (X4[:, 2] * X4[:, 3] > 0.4)).astype(float)
    model4 = train_gbdt(X4, y4, GbdtConfig(num_boosting_rounds=12, num_leaves=10,
                                           max_depth=5))
    oracle_err = 0.0
    for row in X4[:50]:
        oracle_err = max(oracle_err, np.abs(
            tree_shap(model4, row)[:4] - _brute_force_shap(model4, row, 4)).max())
    ok = local_err <= 1e-9 and oracle_err <= 1e-9
    criterion(3, "tree-Shapley local accuracy (1,000 samples) and 2^4 oracle equality",
              ok, f"local {local_err:.2e}, oracle {oracle_err:.2e}")


# --- criterion 4: calibration ---------------------------------------------------------


def test_criterion_4_calibration(world, meme_runs):
    X, y = world.train_features
    splits = load_splits(world.root, 0)
    Xb_eval, _ = features_of(splits.eval, world.root, label_filter=BENIGN)
    fresh = np.stack([extract_features(b)
                      for b in gen_fresh_benign(world.cfg, 2000, offset=10_000)])
    results = {}
    models = {
        "gbdt": world.target.model,
        "linear": train_linear(X, y.astype(float), LinearConfig(seed=0)),
        "ffnn": train_ffnn(X, y.astype(float), FfnnConfig(seed=0)),
    }
    for name, model in models.items():
        thr = calibrate_threshold(model, Xb_eval, FPR_TARGET)
        results[name] = float(np.mean(np.asarray(model.predict_proba(fresh)) >= thr))
    surrogate = meme_runs[0].surrogate
    results["surrogate"] = float(np.mean(
        surrogate.scores_unmetered(fresh) >= surrogate.threshold))
    ok = all(abs(fpr - FPR_TARGET) <= 0.005 for fpr in results.values())
    criterion(4, "calibrated thresholds reproduce 1% FPR within ±0.5pp on 2,000 "
              "fresh benign", ok,
              ", ".join(f"{k} {v:.4f}" for k, v in results.items()))


# --- criteria 5-8: MEME runs -----------------------------------------------------------


def test_criterion_5_budget_accounting(meme_runs):
    queries_ok = all(r.telemetry["training_queries"] == 2048 for r in meme_runs)
    excluded_ok = all(r.telemetry["total_queries"] > r.telemetry["training_queries"]
                      for r in meme_runs)
    per_episode_ok = True
    accounting_ok = True
    for r in meme_runs:
        episodes = r.telemetry["final_episodes"]
        per_episode_ok &= all(1 + ep["turns"] <= 16 for ep in episodes)
        final_queries = r.telemetry["total_queries"] - r.telemetry["training_queries"]
        accounting_ok &= final_queries == sum(1 + ep["turns"] for ep in episodes)
    ok = queries_ok and excluded_ok and per_episode_ok and accounting_ok
    criterion(5, "training ledger reads exactly 2,048 and excludes the test "
              "evaluation; each episode uses at most 16 queries", ok,
              f"ledgers {[r.telemetry['training_queries'] for r in meme_runs]}")


def test_criterion_6_surrogate_fidelity(meme_runs):
    agreements = [r.agreement.label_agreement for r in meme_runs]
    mean_agreement = float(np.mean(agreements))
    ok = mean_agreement >= 0.95
    criterion(6, "surrogate label agreement >= 0.95 on the eval split "
              "(mean over 5 seeds)", ok,
              f"mean {mean_agreement:.4f}, per-seed "
              + str([round(a, 4) for a in agreements]))


def test_criterion_7_method_ordering(meme_runs, ppo_runs, random_runs):
    meme_mean = float(np.mean([r.evasion.evasion_rate for r in meme_runs]))
    ppo_mean = float(np.mean([r.evasion_rate for r in ppo_runs]))
    random_mean = float(np.mean([r.evasion_rate for r in random_runs]))
    ok = (meme_mean > ppo_mean > random_mean) and (meme_mean - ppo_mean >= 0.02)
    criterion(7, "mean evasion ordering MEME > PPO > random with MEME-PPO >= 2pp",
              ok, f"meme {meme_mean:.3f}, ppo {ppo_mean:.3f}, random {random_mean:.3f}")


def test_criterion_8_episode_discipline(meme_runs, ppo_runs, random_runs):
    turns_ok = True
    for r in meme_runs:
        turns_ok &= all(ep["turns"] <= 15 for ep in r.telemetry["final_episodes"])
    # non-evasive episodes count 15 modifications in the mean
    episodes = [{"detected": True, "evaded": False, "turns": 15}] * 4 \
        + [{"detected": True, "evaded": True, "turns": 5}] * 4
    convention_ok = evasion_rate(episodes, 15).mean_modifications == 10.0
    reports = ([r.evasion for r in meme_runs] + list(ppo_runs) + list(random_runs))
    bounds_ok = all(rep.mean_modifications <= 15.0 for rep in reports)
    ok = turns_ok and convention_ok and bounds_ok
    criterion(8, "no episode exceeds 15 modifications; non-evasive episodes "
              "count as 15", ok)


# --- criterion 9: determinism ------------------------------------------------------------


def test_criterion_9_cli_determinism(tmp_path):
    # determinism is exercised end to end through the CLI on a reduced config
    config = {
        "corpus": {"n_target_train_per_class": 100, "n_aux_per_class": 100,
                   "n_eval_per_class": 110, "n_attack_malware": 40,
                   "n_benign_ingredients": 12},
        "meme": {"n": 32, "k": 2, "m": 64, "query_budget": 64,
                 "surrogate_horizon": 32, "importance_sample": 24,
                 "surrogate": {"num_boosting_rounds": 10, "num_leaves": 15}},
        "gbdt": {"num_boosting_rounds": 25},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    assert cli_main(["gen-corpus", "--out", str(tmp_path / "corpus"),
                     "--config", str(cfg_path)]) == 0
    assert cli_main(["train-target", "--corpus", str(tmp_path / "corpus"),
                     "--out", str(tmp_path / "target"), "--target", "gbdt",
                     "--fpr", "0.05", "--config", str(cfg_path)]) == 0
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / f"run_{run}"
        assert cli_main(["attack", "--corpus", str(tmp_path / "corpus"),
                         "--target", str(tmp_path / "target" / "target_gbdt.tefm"),
                         "--mode", "meme", "--seed", "0", "--budget", "64",
                         "--out", str(out), "--config", str(cfg_path)]) == 0
        outputs.append((out / "report.json").read_bytes()
                       + (out / "report.csv").read_bytes())
    ok = outputs[0] == outputs[1]
    criterion(9, "attack --mode meme --seed 0 twice produces byte-identical "
              "reports", ok)
