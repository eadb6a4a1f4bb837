"""Operator CLI: corpus generation, target training, attacks, and reports.

Subcommands: gen-corpus, train-target, attack, report. Every command snapshots
its effective configuration into the output directory and is reproducible from
that snapshot; metric reports never embed wall-clock values (timings go to a
sidecar file) so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import features as feat
from .agents import AdamState, PpoConfig, RolloutBuffer, init_policy
from .corpus import BENIGN, CorpusConfig, CorpusSplits, load_ingredients, load_splits
from .env import MutationEnv
from .errors import (
    DegenerateLabels,
    EmptyEvaluation,
    MissingArtifacts,
    TefbenchError,
    TimedOut,
)
from .meme import (
    MemeConfig,
    collect_with_query_budget,
    cycling_paths,
    evaluate_policy,
    evasion_rate,
    features_of,
    run_meme,
    _train_on_buffer,
)
from .models import (
    Detector,
    FfnnConfig,
    GbdtConfig,
    LinearConfig,
    calibrate_threshold,
    load_model,
    save_model,
    train_ffnn,
    train_gbdt,
    train_linear,
)

log = logging.getLogger("tefbench")

REPORT_COLUMNS = (
    "method", "target", "seed", "n_tested", "n_detected", "n_evaded",
    "evasion_rate", "mean_modifications", "training_queries",
    "label_agreement", "feature_agreement_10", "feature_agreement_20", "partial",
)

_CONFIG_SECTIONS = {
    "corpus": CorpusConfig,
    "ppo": PpoConfig,
    "meme": MemeConfig,
    "gbdt": GbdtConfig,
    "linear": LinearConfig,
    "ffnn": FfnnConfig,
}


def _build_config(cls, overrides: dict):
    """Instantiate a config dataclass, rejecting unknown keys."""
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - valid
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(overrides)
    if cls is MemeConfig and isinstance(kwargs.get("surrogate"), dict):
        kwargs["surrogate"] = _build_config(GbdtConfig, kwargs["surrogate"])
    for tup_key in ("attack_split_seeds", "benign_payload_range", "mal_payload_range"):
        if tup_key in kwargs:
            kwargs[tup_key] = tuple(kwargs[tup_key])
    return cls(**kwargs)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    unknown = set(cfg) - set(_CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _snapshot(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "config.json").open("w") as f:
        json.dump(payload, f, indent=1, sort_keys=True, default=_json_default)


def _json_default(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.asdict(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def _feature_cache(splits: CorpusSplits, which: str, label_filter=None):
    """Features of a split, cached inside the corpus directory."""
    root = Path(splits.root)
    cache = root / "cache"
    cache.mkdir(exist_ok=True)
    suffix = "all" if label_filter is None else str(label_filter)
    path = cache / f"{which}_{suffix}_s{splits.attack_seed if which.startswith('attack') else 0}.bin"
    if path.exists():
        return feat.load_matrix(path, with_labels=True)
    entries = getattr(splits, which)
    X, y = features_of(entries, root, label_filter)
    feat.save_matrix(path, X, y)
    return X, y


# --- subcommands ----------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    sections = _load_config_file(args.config)
    overrides = dict(sections.get("corpus", {}))
    if args.seed is not None:
        overrides["seed"] = args.seed[0] if isinstance(args.seed, list) else args.seed
    cfg = _build_config(CorpusConfig, overrides)
    out = Path(args.out)
    splits = corpus_mod.build_corpus(cfg, out)
    _snapshot(out, {"command": "gen-corpus", "corpus": cfg})
    print(out / "manifest.jsonl")
    log.info("corpus at %s: %d attack binaries", out, len(splits.attack_train)
             + len(splits.attack_test))
    return 0


def _train_target_model(kind: str, X, y, sections: dict, seed: int):
    if kind == "gbdt":
        cfg = _build_config(GbdtConfig, {**sections.get("gbdt", {}), "seed": seed})
        return train_gbdt(X, y, cfg), cfg
    if kind == "linear":
        cfg = _build_config(LinearConfig, {**sections.get("linear", {}), "seed": seed})
        return train_linear(X, y, cfg), cfg
    if kind == "ffnn":
        cfg = _build_config(FfnnConfig, {**sections.get("ffnn", {}), "seed": seed})
        return train_ffnn(X, y, cfg), cfg
    raise ValueError(f"unknown target kind {kind!r}")


def cmd_train_target(args) -> int:
    sections = _load_config_file(args.config)
    seed = (args.seed[0] if args.seed else 0)
    splits = load_splits(args.corpus)
    X, y = _feature_cache(splits, "target_train")
    if np.unique(y).size < 2:
        raise DegenerateLabels("target training set has a single class")
    model, model_cfg = _train_target_model(args.target, X, y.astype(float), sections, seed)
    X_benign_eval, _ = _feature_cache(splits, "eval", label_filter=BENIGN)
    threshold = calibrate_threshold(model, X_benign_eval, args.fpr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / f"target_{args.target}.tefm"
    save_model(model_path, model, threshold,
               {"kind": args.target, "fpr_target": args.fpr, "corpus": str(args.corpus)})
    _snapshot(out, {"command": "train-target", "target": args.target, "fpr": args.fpr,
                    "seed": seed, "model_cfg": model_cfg, "corpus": str(args.corpus)})
    print(model_path)
    return 0


PPO_BASELINE_CHUNK = 1024  # same update cadence as the surrogate-assisted runs


def _train_ppo_baseline(target: Detector, splits: CorpusSplits, ingredients,
                        budget: int, ppo_cfg: PpoConfig, seed: int, max_turns: int,
                        deadline) -> tuple:
    env = MutationEnv(target, ingredients, max_turns, seed=seed)
    policy = init_policy(seed=seed)
    opt = AdamState()
    rng = np.random.default_rng([seed, 0xBB0])
    upd_rng = np.random.default_rng([seed, 0x0DD])
    train_iter = cycling_paths(splits.attack_train, splits.root, seed)
    stats: list = []
    chunk_size = min(ppo_cfg.rollout_horizon, PPO_BASELINE_CHUNK)
    remaining = budget
    while remaining > 0:
        chunk = min(chunk_size, remaining)
        buf = RolloutBuffer()
        collect_with_query_budget(env, policy, chunk, train_iter, rng,
                                  buffer=buf, deadline=deadline)
        _train_on_buffer(policy, buf, ppo_cfg, opt, upd_rng, stats)
        remaining -= chunk
    return policy, stats


def _empty_row() -> dict:
    return {"n_tested": 0, "n_detected": 0, "n_evaded": 0, "evasion_rate": 0.0,
            "mean_modifications": 0.0, "partial": True}


def _attack_one_seed(args, sections, seed: int, target: Detector, fpr_target,
                     deadline) -> tuple[dict, dict]:
    splits = load_splits(args.corpus, attack_seed=seed)
    ingredients = load_ingredients(splits)
    test_paths = [Path(splits.root) / p for p, _ in splits.attack_test]
    ppo_cfg = _build_config(PpoConfig, sections.get("ppo", {}))
    t0 = time.monotonic()
    row = {"method": args.mode, "target": target.name, "seed": seed,
           "training_queries": 0, "label_agreement": None,
           "feature_agreement_10": None, "feature_agreement_20": None}
    extra: dict = {}
    try:
        if args.mode == "random":
            env = MutationEnv(target, ingredients, args.max_turns, seed=seed)
            rng = np.random.default_rng([seed, 0x44D])
            episodes, partial = evaluate_policy(env, None, test_paths, rng,
                                                deadline=deadline)
            report = evasion_rate(episodes, args.max_turns, partial=partial)
            row.update(report.row())
        elif args.mode == "ppo":
            ledger0 = target.queries
            policy, stats = _train_ppo_baseline(target, splits, ingredients,
                                                args.budget, ppo_cfg, seed,
                                                args.max_turns, deadline)
            row["training_queries"] = target.queries - ledger0
            env = MutationEnv(target, ingredients, args.max_turns, seed=seed + 5000)
            rng = np.random.default_rng([seed, 0xEE1])
            episodes, partial = evaluate_policy(env, policy, test_paths, rng,
                                                greedy=True, deadline=deadline)
            report = evasion_rate(episodes, args.max_turns, partial=partial)
            row.update(report.row())
            extra["update_stats"] = stats
        elif args.mode == "meme":
            meme_overrides = dict(sections.get("meme", {}))
            if args.budget is not None:
                k = int(meme_overrides.get("k", 2))
                meme_overrides.setdefault("query_budget", args.budget)
                meme_overrides.setdefault("n", max(1, args.budget // k))
            meme_overrides.setdefault("max_turns", args.max_turns)
            meme_cfg = _build_config(MemeConfig, meme_overrides)
            aux = _feature_cache(splits, "aux")
            eval_data = _feature_cache(splits, "eval")
            run_dir = Path(args.out) / f"seed_{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            result = run_meme(meme_cfg, target, splits, seed=seed, ppo_cfg=ppo_cfg,
                              fpr_target=fpr_target, aux_data=aux,
                              eval_data=eval_data, out_dir=run_dir,
                              deadline=deadline)
            row.update(result.evasion.row())
            row["training_queries"] = result.telemetry["training_queries"]
            if result.agreement:
                row["label_agreement"] = result.agreement.label_agreement
                row["feature_agreement_10"] = result.agreement.feature_agreement_10
                row["feature_agreement_20"] = result.agreement.feature_agreement_20
            extra["telemetry"] = {k: v for k, v in result.telemetry.items()
                                  if k not in ("update_stats",)}
        else:
            raise ValueError(f"unknown mode {args.mode!r}")
    except TimedOut:
        row.update(_empty_row())
    except EmptyEvaluation:
        row.update(_empty_row())
        row["partial"] = False
    extra["wall_clock"] = time.monotonic() - t0
    return row, extra


def _aggregate(rows: list[dict]) -> dict:
    def series(key):
        vals = [r[key] for r in rows if r.get(key) is not None]
        return vals

    agg = {"method": rows[0]["method"], "target": rows[0]["target"],
           "seeds": [r["seed"] for r in rows], "n_runs": len(rows)}
    for key in ("evasion_rate", "mean_modifications", "label_agreement",
                "feature_agreement_10", "feature_agreement_20"):
        vals = series(key)
        if vals:
            agg[f"{key}_mean"] = float(np.mean(vals))
            agg[f"{key}_std"] = float(np.std(vals))
        else:
            agg[f"{key}_mean"] = None
            agg[f"{key}_std"] = None
    return agg


def _write_report(out: Path, rows: list[dict], aggregate: dict, timings: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.json").open("w") as f:
        json.dump({"rows": rows, "aggregate": aggregate}, f, indent=1, sort_keys=True)
    with (out / "report.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k))
                             for k in REPORT_COLUMNS})
    with (out / "timings.json").open("w") as f:
        json.dump(timings, f, indent=1, sort_keys=True)


def cmd_attack(args) -> int:
    sections = _load_config_file(args.config)
    model, threshold, meta = load_model(args.target)
    if threshold is None:
        raise MissingArtifacts(f"{args.target} carries no calibrated threshold")
    target = Detector(model, threshold, name=meta.get("kind", "target"))
    fpr_target = meta.get("fpr_target")
    seeds = args.seed if args.seed else [0, 1, 2, 3, 4]
    deadline = time.monotonic() + args.wall_clock if args.wall_clock else None
    out = Path(args.out)
    rows, timings = [], {}
    for seed in seeds:
        row, extra = _attack_one_seed(args, sections, seed, target, fpr_target, deadline)
        rows.append(row)
        timings[f"seed_{seed}"] = extra.pop("wall_clock")
        log.info("seed %d: %s", seed, row)
    aggregate = _aggregate(rows)
    _write_report(out, rows, aggregate, timings)
    _snapshot(out, {"command": "attack", "mode": args.mode, "target": str(args.target),
                    "corpus": str(args.corpus), "seeds": seeds, "budget": args.budget,
                    "max_turns": args.max_turns, "wall_clock": args.wall_clock,
                    "config_sections": sections})
    print(out / "report.json")
    return 0


def cmd_report(args) -> int:
    merged_rows, aggregates = [], []
    for run_dir in args.runs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            raise MissingArtifacts(f"no report.json under {run_dir}")
        with path.open() as f:
            data = json.load(f)
        merged_rows.extend(data["rows"])
        aggregates.append(data["aggregate"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "comparison.json").open("w") as f:
        json.dump({"rows": merged_rows, "aggregates": aggregates}, f,
                  indent=1, sort_keys=True)
    with (out / "comparison.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for r in merged_rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k))
                             for k in REPORT_COLUMNS})
    print(out / "comparison.json")
    return 0


# --- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tefbench",
                                description="toy-executable evasion benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate the labeled corpus and splits")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int, nargs="*", default=None)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train-target", help="train and calibrate a detector")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--target", choices=("gbdt", "linear", "ffnn"), default="gbdt")
    t.add_argument("--fpr", type=float, default=0.01)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, nargs="*", default=None)
    t.set_defaults(func=cmd_train_target)

    a = sub.add_parser("attack", help="run an evasion method against a target")
    a.add_argument("--corpus", required=True)
    a.add_argument("--target", required=True, help="path to a trained .tefm model")
    a.add_argument("--mode", choices=("random", "ppo", "meme"), required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, nargs="*", default=None)
    a.add_argument("--budget", type=int, default=2048)
    a.add_argument("--max-turns", type=int, default=15)
    a.add_argument("--wall-clock", type=float, default=None)
    a.add_argument("--config")
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="merge attack runs into a comparison table")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TEFB_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TefbenchError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
