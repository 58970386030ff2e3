"""Participant partitioning by initial state, and arrival assignment.

Each cluster is a Gaussian Markov random field over encoded state features
(mean plus inverse covariance); fitting alternates maximum-likelihood
parameter updates with assignment updates, where trajectory mode adds a
switching penalty between consecutive steps solved exactly per trajectory by
dynamic programming.  The number of clusters is chosen by mean silhouette
score.  Arriving participants are mapped to the cluster whose training
members' initial states are closest on average.

Initialization is farthest-first on the (lexicographically sorted) unique
feature rows, so fits are deterministic and independent of input order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mdp import GLU_NORMAL, NORMAL, O2_NORMAL, OfflineDataset, SepsisState, decode_state

_LOG_2PI = float(np.log(2.0 * np.pi))


def encode_features(s0: SepsisState | int) -> np.ndarray:
    """8-dimensional embedding of a state: centered ordinals then booleans.

    Order: heart_rate-1, blood_pressure-1, oxygen-1, glucose-2, diabetic,
    abx_on, vaso_on, vent_on.  The all-normal, all-false state maps to the
    zero vector; the map is injective over all 1440 states.
    """
    s = decode_state(s0) if isinstance(s0, (int, np.integer)) else s0
    return np.array(
        [
            s.heart_rate - NORMAL,
            s.blood_pressure - NORMAL,
            s.oxygen - O2_NORMAL,
            s.glucose - GLU_NORMAL,
            float(s.diabetic),
            float(s.abx_on),
            float(s.vaso_on),
            float(s.vent_on),
        ],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class Partition:
    """A fitted clustering of participants keyed by their initial states."""

    mode: str
    epsilon: float
    seed: int
    feature_encoding: str
    converged: bool
    participant_ids: np.ndarray
    s0_indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    means: np.ndarray
    inv_covs: np.ndarray

    @property
    def n_clusters(self) -> int:
        return self.means.shape[0]

    def member_ids(self, m: int) -> list[int]:
        return [int(i) for i in self.participant_ids[self.labels == m]]

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "feature_encoding": self.feature_encoding,
            "converged": self.converged,
            "participant_ids": self.participant_ids.tolist(),
            "s0_indices": self.s0_indices.tolist(),
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "means": self.means.tolist(),
            "inv_covs": self.inv_covs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        return cls(
            mode=d["mode"],
            epsilon=float(d["epsilon"]),
            seed=int(d["seed"]),
            feature_encoding=d["feature_encoding"],
            converged=bool(d["converged"]),
            participant_ids=np.asarray(d["participant_ids"], dtype=np.int64),
            s0_indices=np.asarray(d["s0_indices"], dtype=np.int64),
            features=np.asarray(d["features"], dtype=np.float64),
            labels=np.asarray(d["labels"], dtype=np.int64),
            means=np.asarray(d["means"], dtype=np.float64),
            inv_covs=np.asarray(d["inv_covs"], dtype=np.float64),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Partition":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _dataset_sequences(dataset: OfflineDataset, mode: str, feature_fn):
    """Per-participant feature sequences (length 1 in initial-state mode)."""
    fn = feature_fn or encode_features
    ids, s0s, seqs = [], [], []
    for traj in dataset.trajectories:
        ids.append(traj.participant_id)
        s0s.append(int(traj.states[0]))
        if mode == "initial_state":
            seqs.append(np.asarray([fn(int(traj.states[0]))], dtype=np.float64))
        elif mode == "trajectory":
            seqs.append(np.asarray([fn(int(s)) for s in traj.states], dtype=np.float64))
        else:
            raise ValueError(f"unknown partition mode: {mode}")
    return np.asarray(ids), np.asarray(s0s), seqs


def _log_likelihoods(x: np.ndarray, means: np.ndarray, inv_covs: np.ndarray) -> np.ndarray:
    """Gaussian log density of each row of x under each cluster, shape (n, M)."""
    n, d = x.shape
    m = means.shape[0]
    out = np.empty((n, m))
    for k in range(m):
        diff = x - means[k]
        quad = np.einsum("ni,ij,nj->n", diff, inv_covs[k], diff)
        sign, logdet = np.linalg.slogdet(inv_covs[k])
        if sign <= 0:
            raise ValueError(f"cluster {k} inverse covariance is not positive definite")
        out[:, k] = -0.5 * quad + 0.5 * logdet - 0.5 * d * _LOG_2PI
    return out


def _assign_sequence(ll: np.ndarray, epsilon: float) -> np.ndarray:
    """Max-likelihood labels for one sequence with a switch penalty, by DP."""
    t_len, m = ll.shape
    if epsilon == 0.0 or t_len == 1:
        return np.argmax(ll, axis=1)
    cost = -ll
    dp = np.zeros((t_len, m))
    arg = np.zeros((t_len, m), dtype=np.int64)
    dp[0] = cost[0]
    for t in range(1, t_len):
        # transition cost from k to m: epsilon unless k == m
        prev = dp[t - 1]
        best_prev = np.min(prev)
        for k in range(m):
            stay = prev[k]
            alt = best_prev + epsilon
            if stay <= alt:
                dp[t, k] = cost[t, k] + stay
                arg[t, k] = k
            else:
                dp[t, k] = cost[t, k] + alt
                arg[t, k] = int(np.argmin(prev))
    labels = np.zeros(t_len, dtype=np.int64)
    labels[-1] = int(np.argmin(dp[-1]))
    for t in range(t_len - 1, 0, -1):
        labels[t - 1] = arg[t, labels[t]]
    return labels


def _farthest_first_centers(unique_rows: np.ndarray, weights: np.ndarray, m: int) -> np.ndarray:
    """Deterministic center initialization on sorted unique rows."""
    mean = np.average(unique_rows, axis=0, weights=weights)
    d0 = np.linalg.norm(unique_rows - mean, axis=1)
    centers = [int(np.argmin(d0))]
    while len(centers) < m:
        dists = np.min(
            np.stack([np.linalg.norm(unique_rows - unique_rows[c], axis=1) for c in centers]),
            axis=0,
        )
        centers.append(int(np.argmax(dists)))
    return unique_rows[centers].copy()


def _weighted_moments(x: np.ndarray, w: np.ndarray, reg: float) -> tuple[np.ndarray, np.ndarray]:
    total = w.sum()
    mean = (w[:, None] * x).sum(axis=0) / total
    centered = x - mean
    cov = (centered.T * w) @ centered / total
    cov = 0.5 * (cov + cov.T) + reg * np.eye(x.shape[1])
    return mean, np.linalg.inv(cov)


def fit_partition(
    data: OfflineDataset,
    m_clusters: int,
    epsilon: float = 0.0,
    mode: str = "initial_state",
    seed: int = 0,
    feature_fn=None,
    max_iters: int = 100,
    reg: float = 1e-3,
) -> Partition:
    """Alternating maximum-likelihood clustering of participant features.

    Parameters are fit per cluster as (mean, regularized inverse covariance);
    assignments maximize the Gaussian log likelihood, plus in trajectory mode a
    per-step switching penalty ``epsilon`` solved by dynamic programming.
    The participant's subgroup is the label of its first (initial) state.
    Raises if the data contain fewer distinct feature points than clusters.
    """
    if m_clusters < 1:
        raise ValueError("m_clusters must be >= 1")
    ids, s0s, seqs = _dataset_sequences(data, mode, feature_fn)
    x = np.concatenate(seqs, axis=0)
    bounds = np.cumsum([0] + [len(s) for s in seqs])
    unique_rows, inverse, counts = np.unique(x, axis=0, return_inverse=True, return_counts=True)
    if unique_rows.shape[0] < m_clusters:
        raise ValueError(
            f"only {unique_rows.shape[0]} distinct feature points; cannot fit "
            f"{m_clusters} clusters"
        )

    means = _farthest_first_centers(unique_rows, counts.astype(float), m_clusters)
    inv_covs = np.stack([np.eye(x.shape[1]) / max(reg, 1e-12)] * m_clusters)
    # Initial assignment: nearest center.
    d2 = ((unique_rows[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)[inverse]

    converged = False
    for _ in range(max_iters):
        # Parameter step: weighted moments per cluster; empty clusters are
        # re-seeded at the currently worst-explained unique row.
        new_means = np.empty_like(means)
        new_inv = np.empty_like(inv_covs)
        for k in range(m_clusters):
            mask = labels == k
            if not np.any(mask):
                ll_u = _log_likelihoods(unique_rows, means, inv_covs)
                best = ll_u.max(axis=1)
                worst_row = int(np.argmin(best))
                new_means[k] = unique_rows[worst_row]
                new_inv[k] = np.linalg.inv(reg * np.eye(x.shape[1]))
                continue
            new_means[k], new_inv[k] = _weighted_moments(
                x[mask], np.ones(int(mask.sum())), reg
            )
        means, inv_covs = new_means, new_inv

        # Assignment step.
        ll_unique = _log_likelihoods(unique_rows, means, inv_covs)
        if mode == "initial_state" or epsilon == 0.0:
            new_labels = np.argmax(ll_unique, axis=1)[inverse]
        else:
            ll_all = ll_unique[inverse]
            new_labels = np.empty(len(x), dtype=np.int64)
            for i in range(len(seqs)):
                seg = slice(bounds[i], bounds[i + 1])
                new_labels[seg] = _assign_sequence(ll_all[seg], epsilon)
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels

    participant_labels = labels[bounds[:-1]]
    init_features = x[bounds[:-1]]
    return Partition(
        mode=mode,
        epsilon=epsilon,
        seed=seed,
        feature_encoding="sepsis-ordinal" if feature_fn is None else "custom",
        converged=converged,
        participant_ids=ids,
        s0_indices=s0s,
        features=init_features,
        labels=participant_labels,
        means=means,
        inv_covs=inv_covs,
    )


def silhouette_score(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Points in singleton clusters score 0 by convention.  Duplicated feature
    rows are collapsed and weighted, so the score is exact but cheap for
    heavily repeated discrete features.
    """
    labels = np.asarray(labels)
    pairs, inverse, counts = np.unique(
        np.column_stack([features, labels[:, None]]), axis=0, return_inverse=True, return_counts=True
    )
    rows = pairs[:, :-1]
    pair_labels = pairs[:, -1].astype(np.int64)
    dist = np.linalg.norm(rows[:, None, :] - rows[None, :, :], axis=2)
    cluster_ids = np.unique(pair_labels)
    weight_by_cluster = {
        int(c): counts[pair_labels == c].sum() for c in cluster_ids
    }
    # Sum of count-weighted distances from each unique pair to each cluster.
    sums = {int(c): dist[:, pair_labels == c] @ counts[pair_labels == c] for c in cluster_ids}
    total, denom = 0.0, counts.sum()
    for p in range(len(pairs)):
        own = int(pair_labels[p])
        w_own = weight_by_cluster[own]
        if w_own <= 1:
            continue  # singleton: silhouette 0
        a = sums[own][p] / (w_own - 1)
        b = min(
            sums[int(c)][p] / weight_by_cluster[int(c)]
            for c in cluster_ids
            if int(c) != own
        ) if len(cluster_ids) > 1 else np.inf
        if not np.isfinite(b):
            continue
        s = 0.0 if max(a, b) == 0 else (b - a) / max(a, b)
        total += counts[p] * s
    return float(total / denom)


def select_m(
    data: OfflineDataset,
    m_range,
    epsilon: float = 0.0,
    mode: str = "initial_state",
    seed: int = 0,
    feature_fn=None,
) -> tuple[int, dict[int, float]]:
    """Fit one partition per candidate cluster count and pick the silhouette
    maximizer (ties toward fewer clusters).  Scores are reported for every
    candidate; candidates whose fit fails score NaN."""
    scores: dict[int, float] = {}
    for m in m_range:
        try:
            part = fit_partition(
                data, m, epsilon=epsilon, mode=mode, seed=seed, feature_fn=feature_fn
            )
            scores[m] = silhouette_score(part.features, part.labels)
        except ValueError:
            scores[m] = float("nan")
    finite = {m: s for m, s in scores.items() if np.isfinite(s)}
    if not finite:
        raise ValueError("no candidate cluster count produced a valid partition")
    best_score = max(finite.values())
    m_star = min(m for m, s in finite.items() if s == best_score)
    return m_star, scores


def _cluster_geometry(partition: Partition):
    """Unique member rows and counts per cluster, for distance queries."""
    geoms = []
    for k in range(partition.n_clusters):
        rows = partition.features[partition.labels == k]
        if len(rows) == 0:
            geoms.append((np.zeros((0, partition.features.shape[1])), np.zeros(0)))
            continue
        uniq, counts = np.unique(rows, axis=0, return_counts=True)
        geoms.append((uniq, counts.astype(float)))
    return geoms


def _resolve_feature_fn(partition: Partition, feature_fn):
    if feature_fn is not None:
        return feature_fn
    if partition.feature_encoding == "sepsis-ordinal":
        return encode_features
    raise ValueError("custom-encoded partition needs an explicit feature_fn")


def _assign_point(x: np.ndarray, partition: Partition, geoms, distance: str) -> int:
    means = np.full(partition.n_clusters, np.inf)
    for k, (rows, counts) in enumerate(geoms):
        if len(rows) == 0:
            continue
        if distance == "euclidean":
            d = np.linalg.norm(rows - x, axis=1)
        elif distance == "mahalanobis":
            diff = rows - x
            d = np.sqrt(np.einsum("ni,ij,nj->n", diff, partition.inv_covs[k], diff))
        else:
            raise ValueError(f"unknown distance: {distance}")
        means[k] = float(d @ counts / counts.sum())
    return int(np.argmin(means))


def assign_arrival(
    s0,
    partition: Partition,
    feature_fn=None,
    distance: str = "euclidean",
) -> int:
    """Cluster whose training members are closest on average to the arrival's
    initial state; ties break toward the smaller index."""
    if partition.n_clusters == 0:
        raise ValueError("partition has no clusters")
    fn = _resolve_feature_fn(partition, feature_fn)
    x = np.asarray(fn(s0), dtype=np.float64)
    return _assign_point(x, partition, _cluster_geometry(partition), distance)


def assign_arrivals(s0_list, partition: Partition, feature_fn=None, distance: str = "euclidean"):
    """Batched arrival assignment; computes cluster geometry once and caches
    repeated arrival states."""
    if partition.n_clusters == 0:
        raise ValueError("partition has no clusters")
    fn = _resolve_feature_fn(partition, feature_fn)
    geoms = _cluster_geometry(partition)
    cache: dict = {}
    out = np.empty(len(s0_list), dtype=np.int64)
    for i, s0 in enumerate(s0_list):
        key = s0 if np.isscalar(s0) or isinstance(s0, (int, np.integer)) else None
        if key is not None and key in cache:
            out[i] = cache[key]
            continue
        x = np.asarray(fn(s0), dtype=np.float64)
        label = _assign_point(x, partition, geoms, distance)
        if key is not None:
            cache[key] = label
        out[i] = label
    return out


def partition_objective(
    partition: Partition,
    policies,
    beta,
    dataset: OfflineDataset,
    gamma: float | None = None,
) -> float:
    """Diagnostic score of a partition: summed best estimated policy gain.

    For each participant, takes the maximum (over candidate policies) of the
    subgroup's behavior-relative gain estimate, and sums over participants.
    """
    from .ope import gain_estimate

    gamma = dataset.gamma if gamma is None else gamma
    by_id = {t.participant_id: i for i, t in enumerate(dataset.trajectories)}
    total = 0.0
    for k in range(partition.n_clusters):
        ids = partition.member_ids(k)
        if not ids:
            continue
        sub = dataset.subset([by_id[i] for i in ids])
        best = max(gain_estimate(sub, pi, beta, gamma=gamma).value for pi in policies)
        total += len(ids) * best
    return total
