"""Reproducible benchmark harness over the simulated sepsis environment.

For each (dataset size, run) cell: generate an offline dataset under the
behavioral policy, let every method select policies, deploy the selections to
a fresh simulated arrival cohort, and score three metrics against exact
per-admission policy values: absolute estimation error of the deployed
selection, mean true return of the deployed policies, and top-1 regret.
Aggregates mean and standard error across runs and emits a CSV, a JSON report
with full provenance, and plot-ready .dat series.

Per-cell seed streams derive from (base seed, size index, run index), so cells
are independent of execution order and the emitted CSV is byte-identical
across reruns of the same configuration.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__ as _pkg_version
from .mdp import decode_state
from .ope import fqe, fqe_estimate, magic_estimate, pdis_estimate, rrs, wdr_estimate, wis_estimate
from .planning import sepsis_policy_suite, state_values
from .selection import FPSConfig, fps_deploy_many, fps_p, fps_train
from .sepsis import SepsisDynamicsConfig, SepsisSim, is_terminal
from .seqvae import sample_trajectories, train as train_vae
from .subgroup import assign_arrivals

BASELINES = ("wis", "pdis", "fqe", "wdr", "magic")
DEFAULT_METHODS = ("fps", "fps-nota", "fps-p", "wis", "pdis", "fqe", "wdr", "magic")


@dataclass(frozen=True)
class BenchConfig:
    """Benchmark sweep configuration."""

    sizes: tuple = (2500, 5000, 10000)
    runs: int = 10
    methods: tuple = DEFAULT_METHODS
    rrs_mode: str = "off"  # off | rrs | vrrs, applied to the OPE baselines
    rrs_reps: int = 20
    seed: int = 0
    cohort: int = 1000
    threads: int = 1
    discounted_return: bool = False
    # The healthcare sweep isolates the effect of partitioning, so the fps
    # method runs without trajectory augmentation unless asked otherwise.
    fps_augment: bool = False
    fps_m_range: tuple = (2, 3, 4, 5, 6, 7, 8)
    fps_min_subgroup: int = 5
    env: SepsisDynamicsConfig = field(default_factory=SepsisDynamicsConfig)

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if any(n < 1 for n in self.sizes):
            raise ValueError("sizes must be >= 1")
        if self.rrs_mode not in ("off", "rrs", "vrrs"):
            raise ValueError("rrs_mode must be off, rrs or vrrs")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env"] = self.env.to_dict()
        return d


def metric_ae(v_true: float, v_est: float) -> float:
    """Absolute error between a true and an estimated value."""
    return abs(v_true - v_est)


def metric_mae(aes) -> float:
    """Mean absolute error across target policies."""
    aes = list(aes)
    if not aes:
        raise ValueError("mean absolute error of an empty list is undefined")
    return float(np.mean(aes))


def metric_regret1(selected_policies, oracle_values) -> float:
    """Mean top-1 regret of per-participant selections.

    ``oracle_values[i]`` maps every candidate policy id to the true value of
    deploying it to participant i; a missing entry is an error.
    """
    if len(selected_policies) != len(oracle_values):
        raise ValueError("selected policies and oracle values must align")
    total = 0.0
    for pid, values in zip(selected_policies, oracle_values):
        if pid not in values:
            raise ValueError(f"missing oracle value for policy {pid!r}")
        total += max(values.values()) - values[pid]
    return total / len(selected_policies)


def _cell_seed(base: int, size_idx: int, run: int, stream: int) -> int:
    return int(
        np.random.SeedSequence(entropy=base, spawn_key=(size_idx, run, stream)).generate_state(1)[0]
    )


def _config_hash(config: BenchConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class _Oracle:
    """Exact per-admission-state values of every candidate policy."""

    def __init__(self, sim: SepsisSim, candidates: dict):
        model = sim.exact_model()
        gamma = sim.config.gamma
        horizon = sim.config.horizon
        self.disc = {
            pid: state_values(pol, model, gamma=gamma, horizon=horizon)
            for pid, pol in candidates.items()
        }
        self.undisc = {
            pid: state_values(pol, model, gamma=1.0, horizon=horizon)
            for pid, pol in candidates.items()
        }

    def values_at(self, s0: int, discounted: bool) -> dict:
        table = self.disc if discounted else self.undisc
        return {pid: float(v[s0]) for pid, v in table.items()}


def _baseline_estimates(name, dataset, candidates, beta, config, method_seed, qhats):
    """Per-candidate value estimates for one OPE baseline, honoring rrs mode."""
    estimates = {}
    for pid, pol in candidates.items():
        if config.rrs_mode == "off":
            if name == "wis":
                rep = wis_estimate(dataset, pol, beta)
            elif name == "pdis":
                rep = pdis_estimate(dataset, pol, beta)
            elif name == "fqe":
                rep = fqe_estimate(dataset, pol, result=qhats[pid])
            elif name == "wdr":
                rep = wdr_estimate(dataset, pol, beta, qhat=qhats[pid])
            elif name == "magic":
                rep = magic_estimate(dataset, pol, beta, qhat=qhats[pid], seed=method_seed)
            else:
                raise ValueError(f"unknown baseline: {name}")
        else:
            base = name
            kwargs = {}
            if name in ("wdr", "magic"):
                kwargs["qhat"] = qhats[pid]
            if name == "magic":
                kwargs["seed"] = method_seed
            rep = rrs(
                base,
                dataset,
                pol,
                beta,
                reps=config.rrs_reps,
                seed=method_seed,
                sample_size=dataset.n,
                **kwargs,
            )
        estimates[pid] = rep.value
    return estimates


def _augmented_union(dataset, beta, seed):
    """Whole-dataset trajectory-model augmentation used by the vrrs mode."""
    from dataclasses import replace as dc_replace

    from .mdp import OfflineDataset
    from .seqvae import TrainConfig

    model, _ = train_vae(
        list(dataset.trajectories),
        TrainConfig(seed=seed),
        n_states=beta.n_states,
        n_actions=beta.n_actions,
    )
    max_id = max(t.participant_id for t in dataset.trajectories)
    synth = sample_trajectories(
        model,
        beta,
        n=dataset.n,
        horizon=dataset.horizon,
        rng=np.random.default_rng(seed),
        terminal_predicate=lambda s: is_terminal(decode_state(s)),
        id_start=max_id + 1,
    )
    return OfflineDataset(
        list(dataset.trajectories) + synth,
        dataset.behavior_policy_id,
        dataset.gamma,
        dataset.horizon,
        dataset.seed,
    )


def _run_cell(sim, candidates, beta, oracle, config, size_idx, n_size, run):
    """One (size, run) cell: dataset, per-method selection, metrics."""
    ds_seed = _cell_seed(config.seed, size_idx, run, 0)
    cohort_seed = _cell_seed(config.seed, size_idx, run, 1)
    dataset = sim.generate_dataset(beta, n_size, ds_seed)
    cohort = sim.sample_admissions(config.cohort, cohort_seed)
    arrivals = [s0 for s0, _ in cohort]
    oracle_disc = [oracle.values_at(s0, discounted=True) for s0 in arrivals]
    oracle_ret = [
        oracle.values_at(s0, discounted=config.discounted_return) for s0 in arrivals
    ]

    candidate_list = [candidates[pid] for pid in sorted(candidates)]
    qhats = None
    tables = {}
    results = {}
    errors = {}

    base_dataset = dataset
    if config.rrs_mode == "vrrs" and any(m in BASELINES for m in config.methods):
        base_dataset = _augmented_union(dataset, beta, _cell_seed(config.seed, size_idx, run, 2))

    for method in config.methods:
        method_seed = _cell_seed(config.seed, size_idx, run, 10 + DEFAULT_METHODS.index(method))
        try:
            if method in ("fps", "fps-nota", "fps-p"):
                augment = config.fps_augment and method == "fps"
                key = ("table", augment)
                if key not in tables:
                    fps_cfg = FPSConfig(
                        m_range=config.fps_m_range,
                        augment=augment,
                        min_subgroup=config.fps_min_subgroup,
                        seed=_cell_seed(config.seed, size_idx, run, 3),
                    )
                    tables[key] = fps_train(
                        dataset,
                        candidate_list,
                        beta,
                        fps_cfg,
                        terminal_predicate=lambda s: is_terminal(decode_state(s)),
                    )
                table = tables[key]
                labels = assign_arrivals(arrivals, table.partition)
                if method == "fps-p":
                    pop = fps_p(table)
                    selected = [pop] * len(arrivals)
                else:
                    selected = [table.rows[int(m)].best_policy_id for m in labels]
                v_est = float(
                    np.mean(
                        [
                            table.rows[int(m)].gains[sel] + table.behavior_returns[int(m)]
                            for m, sel in zip(labels, selected)
                        ]
                    )
                )
            elif method in BASELINES:
                if qhats is None:
                    qhats = {
                        pid: fqe(base_dataset, candidates[pid]) for pid in candidates
                    }
                estimates = _baseline_estimates(
                    method, base_dataset, candidates, beta, config, method_seed, qhats
                )
                best = min(estimates, key=lambda pid: (-estimates[pid], pid))
                selected = [best] * len(arrivals)
                v_est = estimates[best]
            else:
                raise ValueError(f"unknown method: {method}")

            v_true_disc = float(
                np.mean([oracle_disc[i][sel] for i, sel in enumerate(selected)])
            )
            ret = float(np.mean([oracle_ret[i][sel] for i, sel in enumerate(selected)]))
            regret = metric_regret1(selected, oracle_ret)
            results[method] = {
                "ae": metric_ae(v_true_disc, v_est),
                "return": ret,
                "regret1": regret,
                "v_est": v_est,
                "v_true": v_true_disc,
            }
        except Exception as exc:  # isolation: one failing method must not poison the cell
            stage = type(exc).__name__
            errors[method] = f"error:{stage}: {exc}"
    return {"n": n_size, "run": run, "seed": ds_seed, "results": results, "errors": errors}


def run_benchmark(config: BenchConfig, out_dir=None):
    """Execute the full sweep and write report.csv / report.json / *.dat.

    Returns (report dict, n_failed_cells); the CLI maps failures to a nonzero
    exit code.
    """
    sim = SepsisSim(config.env)
    suite = sepsis_policy_suite(sim)
    beta = suite["behavior"]
    candidates = {pid: suite[pid] for pid in ("pi", "wa", "woa")}
    oracle = _Oracle(sim, candidates)

    cells = [
        (size_idx, n_size, run)
        for size_idx, n_size in enumerate(config.sizes)
        for run in range(config.runs)
    ]

    def work(cell):
        size_idx, n_size, run = cell
        return _run_cell(sim, candidates, beta, oracle, config, size_idx, n_size, run)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            cell_results = list(pool.map(work, cells))
    else:
        cell_results = [work(c) for c in cells]

    report = _aggregate(config, cell_results)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_outputs(report, out_dir)
    n_failed = sum(len(c["errors"]) for c in cell_results)
    return report, n_failed


def _aggregate(config: BenchConfig, cell_results) -> dict:
    rows = []
    for n_size in config.sizes:
        per_method: dict[str, dict[str, list[float]]] = {}
        for cell in cell_results:
            if cell["n"] != n_size:
                continue
            for method, res in cell["results"].items():
                bucket = per_method.setdefault(method, {"ae": [], "return": [], "regret1": []})
                for metric in ("ae", "return", "regret1"):
                    bucket[metric].append(res[metric])
        for method in config.methods:
            if method not in per_method:
                continue
            for metric in ("ae", "return", "regret1"):
                vals = per_method[method][metric]
                mean = float(np.mean(vals))
                se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
                rows.append(
                    {
                        "method": method,
                        "N": n_size,
                        "metric": metric,
                        "mean": mean,
                        "se": se,
                        "runs": len(vals),
                        "seed0": config.seed,
                    }
                )
    return {
        "config": config.to_dict(),
        "config_hash": _config_hash(config),
        "package_version": _pkg_version,
        "rows": rows,
        "cells": cell_results,
    }


def _write_outputs(report: dict, out_dir) -> None:
    write_report_csv(report, os.path.join(out_dir, "report.csv"))
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_dat_series(report, out_dir)


def write_report_csv(report: dict, path) -> None:
    lines = ["method,N,metric,mean,se,runs,seed0"]
    for row in report["rows"]:
        lines.append(
            f"{row['method']},{row['N']},{row['metric']},{row['mean']!r},"
            f"{row['se']!r},{row['runs']},{row['seed0']}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_dat_series(report: dict, out_dir) -> None:
    """One gnuplot-ready file per metric: N then mean/se per method."""
    methods = list(dict.fromkeys(r["method"] for r in report["rows"]))
    sizes = sorted({r["N"] for r in report["rows"]})
    for metric in ("ae", "return", "regret1"):
        header = "# N " + " ".join(f"{m}_mean {m}_se" for m in methods)
        lines = [header]
        for n_size in sizes:
            cells = []
            for m in methods:
                match = [
                    r
                    for r in report["rows"]
                    if r["method"] == m and r["N"] == n_size and r["metric"] == metric
                ]
                if match:
                    cells.append(f"{match[0]['mean']!r} {match[0]['se']!r}")
                else:
                    cells.append("nan nan")
            lines.append(f"{n_size} " + " ".join(cells))
        with open(os.path.join(out_dir, f"{metric}.dat"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
