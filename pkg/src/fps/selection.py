"""First-glance policy selection: per-subgroup training and deployment.

Training partitions the offline participants by initial state, optionally
augments each subgroup with model-generated trajectories, scores every
candidate policy per subgroup with the behavior-relative gain estimator, and
records the per-subgroup winners in a selection table.  Deployment maps an
arriving participant's initial state to its subgroup and returns that row's
policy; nothing beyond the initial state is ever consulted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .mdp import OfflineDataset
from .ope import gain_estimate
from .seqvae import TrainConfig, sample_trajectories, train
from .subgroup import Partition, assign_arrival, assign_arrivals, fit_partition, select_m


@dataclass(frozen=True)
class FPSConfig:
    """Knobs of the training pipeline.

    ``m_clusters=None`` selects the cluster count by silhouette score over
    ``m_range``.  Groups smaller than ``min_subgroup`` fall back to the
    population-level selection.  ``feature_fn`` overrides the state feature
    encoding (e.g. for non-sepsis state spaces); it is carried by reference
    and recorded only as a descriptor in serialized tables.
    """

    m_clusters: int | None = None
    m_range: tuple = (2, 3, 4, 5, 6, 7, 8)
    epsilon: float = 0.0
    mode: str = "initial_state"
    augment: bool = True
    min_subgroup: int = 5
    seed: int = 0
    distance: str = "euclidean"
    ess_mode: str = "weights"
    vae_hidden: int = 64
    vae_latent: int = 8
    vae: TrainConfig = field(default_factory=TrainConfig)
    feature_fn: object = None

    def snapshot(self) -> dict:
        d = asdict(self)
        d["feature_fn"] = "default" if self.feature_fn is None else "custom"
        d["vae"] = asdict(self.vae)
        return d


@dataclass(frozen=True)
class SubgroupRow:
    """Selection outcome for one subgroup."""

    best_policy_id: str
    gains: dict
    variance_bounds: dict
    ess: dict
    n_real: int
    n_synthetic: int
    fallback: bool = False


@dataclass(frozen=True)
class SelectionTable:
    """Per-subgroup policy selection produced by training."""

    partition: Partition
    rows: list[SubgroupRow]
    policy_ids: list[str]
    behavior_id: str
    behavior_returns: list[float]
    config_snapshot: dict

    def to_dict(self) -> dict:
        return {
            "partition": self.partition.to_dict(),
            "rows": [asdict(r) for r in self.rows],
            "policy_ids": self.policy_ids,
            "behavior_id": self.behavior_id,
            "behavior_returns": self.behavior_returns,
            "config": self.config_snapshot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionTable":
        return cls(
            partition=Partition.from_dict(d["partition"]),
            rows=[SubgroupRow(**r) for r in d["rows"]],
            policy_ids=list(d["policy_ids"]),
            behavior_id=d["behavior_id"],
            behavior_returns=[float(x) for x in d["behavior_returns"]],
            config_snapshot=d["config"],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SelectionTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None:
                raise RuntimeError(f"stage '{name}' failed: {exc}") from exc

    return _Ctx()


def _subgroup_vae_config(vae: TrainConfig, seed: int, subgroup: int) -> TrainConfig:
    """Per-subgroup training config with a seed derived from the pipeline seed."""
    derived = int(
        np.random.SeedSequence(entropy=seed, spawn_key=(subgroup, 0)).generate_state(1)[0]
    )
    return replace(vae, seed=derived, eval_trace=False)


def _select_best(gains: dict, bounds: dict, behavior_id: str) -> str:
    """Gain argmax; ties prefer the smaller variance bound, then the behavior
    policy if it is a candidate, then the lexicographically smaller id."""
    def key(pid):
        return (
            -gains[pid],
            bounds.get(pid, float("inf")),
            0 if pid == behavior_id else 1,
            pid,
        )

    return min(gains, key=key)


def fps_train(
    dataset: OfflineDataset,
    policies,
    beta,
    config: FPSConfig | None = None,
    terminal_predicate=None,
) -> SelectionTable:
    """Training phase: partition, optional per-subgroup augmentation, gain
    estimation per candidate, and per-subgroup selection.

    Fully deterministic given (dataset, policies, config).  Subgroups smaller
    than ``config.min_subgroup`` fall back to the population-level gain
    ranking and are flagged.
    """
    config = config or FPSConfig()
    if not policies:
        raise ValueError("candidate policy set is empty")
    if dataset.n < 1:
        raise ValueError("empty dataset")
    gamma = dataset.gamma

    with _stage("partition-selection"):
        if config.m_clusters is None:
            m_star, _ = select_m(
                dataset,
                config.m_range,
                epsilon=config.epsilon,
                mode=config.mode,
                seed=config.seed,
                feature_fn=config.feature_fn,
            )
        else:
            m_star = config.m_clusters

    with _stage("partition-fit"):
        partition = fit_partition(
            dataset,
            m_star,
            epsilon=config.epsilon,
            mode=config.mode,
            seed=config.seed,
            feature_fn=config.feature_fn,
        )

    by_id = {t.participant_id: i for i, t in enumerate(dataset.trajectories)}
    max_id = max(t.participant_id for t in dataset.trajectories)
    n_states = beta.n_states
    n_actions = beta.n_actions

    global_gains = None

    def population_gains():
        nonlocal global_gains
        if global_gains is None:
            reports = {
                pi.id: gain_estimate(dataset, pi, beta, gamma=gamma, ess_mode=config.ess_mode)
                for pi in policies
            }
            global_gains = reports
        return global_gains

    rows: list[SubgroupRow] = []
    behavior_means: list[float] = []
    for m in range(partition.n_clusters):
        ids = partition.member_ids(m)
        sub = dataset.subset([by_id[i] for i in ids])
        behavior_means.append(float(sub.returns().mean()) if sub.n else 0.0)

        if sub.n < config.min_subgroup:
            with _stage("selection"):
                reports = population_gains()
                gains = {pid: r.value for pid, r in reports.items()}
                bounds = {pid: r.variance_bound for pid, r in reports.items()}
                esses = {pid: r.ess for pid, r in reports.items()}
                best = _select_best(gains, bounds, beta.id)
            rows.append(
                SubgroupRow(best, gains, bounds, esses, sub.n, 0, fallback=True)
            )
            continue

        trajectories = list(sub.trajectories)
        n_synth = 0
        if config.augment:
            with _stage("augmentation"):
                vae_cfg = _subgroup_vae_config(config.vae, config.seed, m)
                model, _ = train(
                    trajectories,
                    vae_cfg,
                    n_states=n_states,
                    n_actions=n_actions,
                    hidden=config.vae_hidden,
                    latent=config.vae_latent,
                )
                rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=config.seed, spawn_key=(m, 1))
                )
                synth = sample_trajectories(
                    model,
                    beta,
                    n=sub.n,
                    horizon=dataset.horizon,
                    rng=rng,
                    terminal_predicate=terminal_predicate,
                    id_start=max_id + 1 + m * dataset.n,
                )
                trajectories = trajectories + synth
                n_synth = len(synth)

        with _stage("estimation"):
            union = OfflineDataset(
                trajectories, dataset.behavior_policy_id, gamma, dataset.horizon, dataset.seed
            )
            reports = {
                pi.id: gain_estimate(union, pi, beta, gamma=gamma, ess_mode=config.ess_mode)
                for pi in policies
            }
        with _stage("selection"):
            gains = {pid: r.value for pid, r in reports.items()}
            bounds = {pid: r.variance_bound for pid, r in reports.items()}
            esses = {pid: r.ess for pid, r in reports.items()}
            best = _select_best(gains, bounds, beta.id)
        rows.append(SubgroupRow(best, gains, bounds, esses, sub.n, n_synth))

    return SelectionTable(
        partition=partition,
        rows=rows,
        policy_ids=[pi.id for pi in policies],
        behavior_id=beta.id,
        behavior_returns=behavior_means,
        config_snapshot=config.snapshot(),
    )


def fps_nota(
    dataset: OfflineDataset,
    policies,
    beta,
    config: FPSConfig | None = None,
) -> SelectionTable:
    """Ablation: the identical pipeline with augmentation disabled."""
    config = config or FPSConfig()
    return fps_train(dataset, policies, beta, replace(config, augment=False))


def fps_deploy(s0, table: SelectionTable, feature_fn=None) -> str:
    """Policy id for an arriving participant, from the initial state alone."""
    distance = table.config_snapshot.get("distance", "euclidean")
    label = assign_arrival(s0, table.partition, feature_fn=feature_fn, distance=distance)
    return table.rows[label].best_policy_id


def fps_deploy_many(s0_list, table: SelectionTable, feature_fn=None) -> list[str]:
    """Batched deployment over a cohort of initial states."""
    distance = table.config_snapshot.get("distance", "euclidean")
    labels = assign_arrivals(s0_list, table.partition, feature_fn=feature_fn, distance=distance)
    return [table.rows[int(m)].best_policy_id for m in labels]


def fps_p(table: SelectionTable) -> str:
    """Single population policy: the mode of the per-subgroup selections.

    Ties prefer the policy backing more training participants, then the
    lexicographically smaller id.
    """
    counts: dict[str, int] = {}
    members: dict[str, int] = {}
    for row in table.rows:
        counts[row.best_policy_id] = counts.get(row.best_policy_id, 0) + 1
        members[row.best_policy_id] = members.get(row.best_policy_id, 0) + row.n_real
    return min(counts, key=lambda pid: (-counts[pid], -members[pid], pid))
