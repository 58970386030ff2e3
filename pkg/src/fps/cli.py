"""Command-line interface.

Subcommands: simulate, train-policies, partition, augment, select, deploy,
bench, report.  Global flags: --config (environment JSON), --seed, --out,
--threads; every environment constant can be overridden with repeated
--env key=value flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .bench import BenchConfig, run_benchmark, write_report_csv
from .mdp import decode_state, load_dataset, save_dataset
from .ope import write_estimate_csv, gain_estimate
from .planning import load_policy, save_policy, sepsis_policy_suite
from .selection import FPSConfig, SelectionTable, fps_deploy, fps_train
from .sepsis import SepsisDynamicsConfig, SepsisSim, is_terminal
from .seqvae import TrainConfig, sample_trajectories, train as train_vae
from .subgroup import Partition, fit_partition, select_m


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _load_env(args) -> SepsisDynamicsConfig:
    cfg = SepsisDynamicsConfig.load(args.config) if args.config else SepsisDynamicsConfig()
    overrides = {}
    for item in args.env or []:
        if "=" not in item:
            raise SystemExit(f"--env expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key] = _parse_value(raw)
    if overrides:
        d = cfg.to_dict()
        unknown = set(overrides) - set(d)
        if unknown:
            raise SystemExit(f"unknown environment constant(s): {sorted(unknown)}")
        d.update(overrides)
        cfg = SepsisDynamicsConfig.from_dict(d)
    return cfg


def _out_path(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _cmd_simulate(args) -> int:
    sim = SepsisSim(_load_env(args))
    if args.policy:
        policy = load_policy(args.policy)
    else:
        policy = sepsis_policy_suite(sim)["behavior"]
    dataset = sim.generate_dataset(policy, args.n, args.seed)
    path = _out_path(args, args.name)
    save_dataset(dataset, path)
    print(f"wrote {dataset.n} trajectories to {path}")
    return 0


def _cmd_train_policies(args) -> int:
    sim = SepsisSim(_load_env(args))
    suite = sepsis_policy_suite(sim)
    for pid in ("pi", "wa", "woa", "behavior"):
        path = _out_path(args, f"policy_{pid}.json")
        save_policy(suite[pid], path)
        print(f"wrote {path}")
    return 0


def _cmd_partition(args) -> int:
    dataset = load_dataset(args.data)
    if args.m is not None:
        part = fit_partition(dataset, args.m, epsilon=args.epsilon, mode=args.mode, seed=args.seed)
        scores = {}
    else:
        m_star, scores = select_m(
            dataset, range(args.m_min, args.m_max + 1), epsilon=args.epsilon,
            mode=args.mode, seed=args.seed,
        )
        part = fit_partition(dataset, m_star, epsilon=args.epsilon, mode=args.mode, seed=args.seed)
    path = _out_path(args, "partition.json")
    part.save(path)
    sizes = part.cluster_sizes().tolist()
    print(f"wrote {path}: {part.n_clusters} clusters, sizes {sizes}")
    for m, s in sorted(scores.items()):
        print(f"  silhouette[M={m}] = {s:.4f}")
    return 0


def _cmd_augment(args) -> int:
    dataset = load_dataset(args.data)
    beta = load_policy(args.behavior)
    model, trace = train_vae(
        list(dataset.trajectories),
        TrainConfig(seed=args.seed),
        n_states=beta.n_states,
        n_actions=beta.n_actions,
    )
    max_id = max(t.participant_id for t in dataset.trajectories)
    synth = sample_trajectories(
        model,
        beta,
        n=args.n or dataset.n,
        horizon=dataset.horizon,
        rng=np.random.default_rng(args.seed),
        terminal_predicate=lambda s: is_terminal(decode_state(s)),
        id_start=max_id + 1,
    )
    out = dataset.__class__(
        synth, dataset.behavior_policy_id, dataset.gamma, dataset.horizon, args.seed
    )
    path = _out_path(args, "synthetic.jsonl")
    save_dataset(out, path)
    model_path = _out_path(args, "trajectory_model.json")
    model.save(model_path)
    print(f"wrote {len(synth)} synthetic trajectories to {path} (model: {model_path}, "
          f"final objective {trace[-1]:.3f})")
    return 0


def _cmd_select(args) -> int:
    dataset = load_dataset(args.data)
    beta = load_policy(args.behavior)
    policies = [load_policy(p) for p in args.policy]
    cfg = FPSConfig(
        m_clusters=args.m,
        augment=not args.no_augment,
        seed=args.seed,
        min_subgroup=args.min_subgroup,
    )
    table = fps_train(
        dataset, policies, beta, cfg,
        terminal_predicate=lambda s: is_terminal(decode_state(s)),
    )
    path = _out_path(args, "selection_table.json")
    table.save(path)
    rows = []
    by_id = {t.participant_id: i for i, t in enumerate(dataset.trajectories)}
    for m, row in enumerate(table.rows):
        ids = table.partition.member_ids(m)
        sub = dataset.subset([by_id[i] for i in ids])
        for pid in table.policy_ids:
            rep = gain_estimate(sub, policies[[p.id for p in policies].index(pid)], beta)
            rows.append((rep, pid, m))
        print(f"subgroup {m}: n={row.n_real} (+{row.n_synthetic} synthetic) -> {row.best_policy_id}"
              + (" [fallback]" if row.fallback else ""))
    write_estimate_csv(rows, _out_path(args, "estimates.csv"))
    print(f"wrote {path}")
    return 0


def _cmd_deploy(args) -> int:
    table = SelectionTable.load(args.table)
    print(fps_deploy(args.state, table))
    return 0


def _cmd_bench(args) -> int:
    sizes = tuple(int(x) for x in args.sizes.split(","))
    methods = tuple(args.methods.split(","))
    cfg = BenchConfig(
        sizes=sizes,
        runs=args.runs,
        methods=methods,
        rrs_mode=args.rrs,
        seed=args.seed,
        cohort=args.cohort,
        threads=args.threads,
        fps_augment=args.fps_augment,
        discounted_return=args.discounted,
        env=_load_env(args),
    )
    report, n_failed = run_benchmark(cfg, out_dir=args.out)
    for row in report["rows"]:
        print(
            f"{row['method']:>9s} N={row['N']:<6d} {row['metric']:>7s} "
            f"{row['mean']:+.4f} +/- {row['se']:.4f} ({row['runs']} runs)"
        )
    if n_failed:
        print(f"{n_failed} method cell(s) failed; see report.json", file=sys.stderr)
        return 1
    return 0


def _cmd_report(args) -> int:
    with open(args.input) as fh:
        report = json.load(fh)
    path = _out_path(args, "report.csv")
    write_report_csv(report, path)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fps", description=__doc__)
    parser.add_argument("--config", help="environment config JSON", default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument(
        "--env", action="append", metavar="KEY=VALUE",
        help="override one environment constant (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate an offline dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--policy", help="behavior policy JSON (default: built-in mixture)")
    p.add_argument("--name", default="dataset.jsonl")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("train-policies", help="build behavior and candidate policies")
    p.set_defaults(fn=_cmd_train_policies)

    p = sub.add_parser("partition", help="fit a subgroup partition")
    p.add_argument("--data", required=True)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--m-min", type=int, default=2)
    p.add_argument("--m-max", type=int, default=8)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--mode", choices=("initial_state", "trajectory"), default="initial_state")
    p.set_defaults(fn=_cmd_partition)

    p = sub.add_parser("augment", help="train the trajectory model and sample synthetic data")
    p.add_argument("--data", required=True)
    p.add_argument("--behavior", required=True, help="behavior policy JSON")
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(fn=_cmd_augment)

    p = sub.add_parser("select", help="run the full training phase")
    p.add_argument("--data", required=True)
    p.add_argument("--behavior", required=True)
    p.add_argument("--policy", action="append", required=True, help="candidate policy JSON (repeatable)")
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--min-subgroup", type=int, default=5)
    p.set_defaults(fn=_cmd_select)

    p = sub.add_parser("deploy", help="look up the policy for an arriving state")
    p.add_argument("--table", required=True)
    p.add_argument("--state", type=int, required=True)
    p.set_defaults(fn=_cmd_deploy)

    p = sub.add_parser("bench", help="run the benchmark sweep")
    p.add_argument("--sizes", default="2500,5000,10000")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument(
        "--methods", default="fps,fps-nota,fps-p,wis,pdis,fqe,wdr,magic"
    )
    p.add_argument("--rrs", choices=("off", "rrs", "vrrs"), default="off")
    p.add_argument("--cohort", type=int, default=1000)
    p.add_argument("--fps-augment", action="store_true")
    p.add_argument("--discounted", action="store_true")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("report", help="re-emit report.csv from a report.json")
    p.add_argument("--input", required=True)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
