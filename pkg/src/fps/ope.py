"""Off-policy estimators over tabular offline datasets.

Implements full-trajectory and per-decision importance sampling, tabular
fitted-Q evaluation, weighted doubly-robust and blended partial-horizon
estimators, the behavior-relative per-group gain estimator with its
effective-sample-size variance bound, and a bootstrap-resampling wrapper.

All estimators are pure functions of (dataset, policies, parameters, seed).
Trajectories shorter than the longest one are padded with an absorbing
pseudo-state: cumulative importance weights stay frozen at their final value,
padded rewards and model values are zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .mdp import OfflineDataset, Trajectory


class CoverageError(ValueError):
    """The behavior policy assigns zero probability to a logged action."""


class DegenerateSupportError(ValueError):
    """All importance weights vanished; the estimate is undefined."""


@dataclass(frozen=True)
class ISWeights:
    """Cumulative and per-step partial importance weights of one trajectory."""

    cumulative: float
    partial: np.ndarray


@dataclass(frozen=True)
class EstimateReport:
    """One estimator output with its diagnostics."""

    estimator_id: str
    value: float
    ess: float
    variance_bound: float | None
    n_used: int

    def __post_init__(self):
        if self.ess > self.n_used + 1e-9:
            raise ValueError("effective sample size cannot exceed the sample count")
        if self.variance_bound is not None and self.variance_bound < 0:
            raise ValueError("variance bound must be nonnegative")


@dataclass(frozen=True)
class FQEResult:
    """Tabular fitted-Q fixed point plus coverage diagnostics."""

    v: np.ndarray
    q: np.ndarray
    n_unvisited: int
    sweeps_used: int
    converged: bool


class PackedDataset:
    """Rectangular array view of a dataset, padded to the longest trajectory."""

    def __init__(self, dataset: OfflineDataset):
        self.n = dataset.n
        lengths = np.array([len(t) for t in dataset.trajectories], dtype=np.int64)
        t_max = int(lengths.max()) if self.n else 0
        self.lengths = lengths
        self.t_max = t_max
        self.states = np.zeros((self.n, t_max), dtype=np.int64)
        self.actions = np.zeros((self.n, t_max), dtype=np.int64)
        self.rewards = np.zeros((self.n, t_max))
        self.next_states = np.zeros((self.n, t_max), dtype=np.int64)
        self.mask = np.zeros((self.n, t_max), dtype=bool)
        self.cont = np.zeros((self.n, t_max))
        self.participant_ids = np.array([t.participant_id for t in dataset.trajectories])
        for i, traj in enumerate(dataset.trajectories):
            l = len(traj)
            self.states[i, :l] = traj.states
            self.actions[i, :l] = traj.actions
            self.rewards[i, :l] = traj.rewards
            self.next_states[i, : l - 1] = traj.states[1:]
            self.next_states[i, l - 1] = traj.terminal_state
            self.mask[i, :l] = True
            self.cont[i, : l - 1] = 1.0
            self.cont[i, l - 1] = 0.0 if traj.terminated_early else 1.0

    def returns(self, gamma: float) -> np.ndarray:
        return (self.rewards * gamma ** np.arange(self.t_max)[None, :]).sum(axis=1)

    def step_ratios(self, pi, beta) -> np.ndarray:
        """Per-step likelihood ratios, 1 at padded positions.

        Raises :class:`CoverageError` if the behavior policy has zero
        probability on any logged action.
        """
        beta_p = beta.probs[self.states, self.actions]
        zero = (beta_p <= 0.0) & self.mask
        if np.any(zero):
            i, t = np.argwhere(zero)[0]
            raise CoverageError(
                f"behavior policy has zero probability at participant "
                f"{self.participant_ids[i]}, step {t + 1}"
            )
        ratios = np.where(self.mask, pi.probs[self.states, self.actions], 1.0)
        return np.where(self.mask, ratios / np.where(self.mask, beta_p, 1.0), 1.0)

    def cumulative_ratios(self, pi, beta) -> np.ndarray:
        """rho[i, k]: product of ratios through step k, frozen past the end."""
        return np.cumprod(self.step_ratios(pi, beta), axis=1)


def importance_weights(traj: Trajectory, pi, beta) -> ISWeights:
    """Cumulative and partial importance weights of a single trajectory."""
    pi_p = pi.probs[traj.states, traj.actions]
    beta_p = beta.probs[traj.states, traj.actions]
    zero = beta_p <= 0.0
    if np.any(zero):
        t = int(np.argmax(zero))
        raise CoverageError(
            f"behavior policy has zero probability at participant "
            f"{traj.participant_id}, step {t + 1}"
        )
    partial = np.cumprod(pi_p / beta_p, axis=0)
    return ISWeights(cumulative=float(partial[-1]), partial=partial)


def effective_sample_size(values, mode: str = "weights") -> float:
    """(sum x)^2 / sum x^2 of the given inputs.

    ``mode`` documents what the inputs are: ``weights`` (importance weights,
    the standard diagnostic) or ``returns`` (per-trajectory returns, the
    per-group proxy variant).  The formula is identical for both.
    """
    if mode not in ("weights", "returns"):
        raise ValueError(f"unknown ess mode: {mode}")
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("effective sample size of an empty list is undefined")
    denom = float(np.sum(x * x))
    if denom == 0.0:
        raise ValueError("effective sample size undefined: all inputs are zero")
    return float(np.sum(x) ** 2 / denom)


def wis_estimate(dataset: OfflineDataset, pi, beta, gamma: float | None = None) -> EstimateReport:
    """Self-normalized full-trajectory importance sampling."""
    gamma = dataset.gamma if gamma is None else gamma
    if dataset.n < 1:
        raise ValueError("empty dataset")
    packed = PackedDataset(dataset)
    omega = packed.cumulative_ratios(pi, beta)[:, -1]
    total = omega.sum()
    if total == 0.0:
        raise DegenerateSupportError("all importance weights are zero")
    g = packed.returns(gamma)
    value = float(np.dot(omega, g) / total)
    return EstimateReport("wis", value, effective_sample_size(omega), None, dataset.n)


def pdis_estimate(dataset: OfflineDataset, pi, beta, gamma: float | None = None) -> EstimateReport:
    """Per-decision importance sampling (unnormalized)."""
    gamma = dataset.gamma if gamma is None else gamma
    packed = PackedDataset(dataset)
    rho = packed.cumulative_ratios(pi, beta)
    discounts = gamma ** np.arange(packed.t_max)[None, :]
    value = float((rho * packed.rewards * discounts).sum() / packed.n)
    omega = rho[:, -1]
    ess = effective_sample_size(omega) if np.any(omega != 0) else 0.0
    return EstimateReport("pdis", value, ess, None, dataset.n)


def fqe(
    dataset: OfflineDataset,
    pi,
    gamma: float | None = None,
    sweeps: int | None = None,
    tol: float = 1e-12,
) -> FQEResult:
    """Tabular fitted-Q evaluation.

    Iterates Q(s, a) <- mean over logged transitions from (s, a) of
    ``r + gamma * E_{a' ~ pi} Q(s', a')`` until the fixed point; state-action
    pairs never visited stay at zero and are counted in the result.
    Bootstrapping stops at early-terminated episode ends.
    """
    gamma = dataset.gamma if gamma is None else gamma
    n_states, n_actions = pi.probs.shape
    packed = PackedDataset(dataset)
    m = packed.mask
    s_f = packed.states[m]
    a_f = packed.actions[m]
    r_f = packed.rewards[m]
    ns_f = packed.next_states[m]
    cont_f = packed.cont[m]
    flat = s_f * n_actions + a_f
    counts = np.bincount(flat, minlength=n_states * n_actions).astype(np.float64)
    visited = counts > 0
    safe_counts = np.where(visited, counts, 1.0)

    q = np.zeros(n_states * n_actions)
    max_sweeps = sweeps if sweeps is not None else 10_000
    converged = False
    used = 0
    for used in range(1, max_sweeps + 1):
        v = np.einsum(
            "sa,sa->s", pi.probs, q.reshape(n_states, n_actions)
        )
        targets = r_f + gamma * cont_f * v[ns_f]
        q_new = np.bincount(flat, weights=targets, minlength=n_states * n_actions)
        q_new = np.where(visited, q_new / safe_counts, 0.0)
        delta = float(np.max(np.abs(q_new - q))) if q.size else 0.0
        q = q_new
        if delta < tol:
            converged = True
            break
    q = q.reshape(n_states, n_actions)
    v = np.einsum("sa,sa->s", pi.probs, q)
    return FQEResult(
        v=v,
        q=q,
        n_unvisited=int((~visited).sum()),
        sweeps_used=used,
        converged=converged,
    )


def fqe_estimate(
    dataset: OfflineDataset,
    pi,
    beta=None,
    gamma: float | None = None,
    sweeps: int | None = None,
    result: FQEResult | None = None,
) -> EstimateReport:
    """Dataset-level value from fitted-Q: mean of E_{a ~ pi} Q(s0, a) over the
    logged initial states.  ``beta`` is accepted for interface uniformity; a
    precomputed fit can be passed as ``result``."""
    gamma = dataset.gamma if gamma is None else gamma
    if result is None:
        result = fqe(dataset, pi, gamma=gamma, sweeps=sweeps)
    s0 = np.array([t.states[0] for t in dataset.trajectories])
    value = float(result.v[s0].mean())
    return EstimateReport("fqe", value, float(dataset.n), None, dataset.n)


def _qv_arrays(packed: PackedDataset, pi, qhat: np.ndarray):
    vhat = np.einsum("sa,sa->s", pi.probs, qhat)
    qsa = np.where(packed.mask, qhat[packed.states, packed.actions], 0.0)
    vst = np.where(packed.mask, vhat[packed.states], 0.0)
    # Value of the state reached after each step; zero at each trajectory's
    # final step (the evaluation boundary) and at padding.
    vafter = np.zeros_like(vst)
    if packed.t_max > 1:
        vafter[:, :-1] = vst[:, 1:]
    return qsa, vst, vafter


def _partial_horizon_estimates(
    rho: np.ndarray,
    rewards: np.ndarray,
    qsa: np.ndarray,
    vst: np.ndarray,
    vafter: np.ndarray,
    gamma: float,
    strict: bool,
) -> np.ndarray:
    """g[j] for j = 0..T: j importance-sampled steps, model value beyond.

    ``strict`` raises when no trajectory has support at the first step;
    bootstrap resamples instead zero out degenerate columns.
    """
    n, t_max = rho.shape
    col_sums = rho.sum(axis=0)
    if strict and t_max > 0 and col_sums[0] == 0.0:
        raise DegenerateSupportError("all importance weights are zero at the first step")
    safe = np.where(col_sums > 0.0, col_sums, 1.0)
    w = np.where(col_sums[None, :] > 0.0, rho / safe[None, :], 0.0)
    w_prev = np.empty_like(w)
    w_prev[:, 0] = 1.0 / n
    w_prev[:, 1:] = w[:, :-1]

    discounts = gamma ** np.arange(t_max)
    is_terms = discounts * (w * rewards).sum(axis=0)
    corr_terms = discounts * ((w * qsa).sum(axis=0) - (w_prev * vst).sum(axis=0))

    g = np.zeros(t_max + 1)
    g[0] = vst[:, 0].mean() if t_max > 0 else 0.0
    prefix = np.cumsum(is_terms - corr_terms)
    boundary = gamma ** np.arange(1, t_max + 1) * (w * vafter).sum(axis=0)
    g[1:] = prefix + boundary
    return g


def wdr_estimate(
    dataset: OfflineDataset,
    pi,
    beta,
    gamma: float | None = None,
    qhat: np.ndarray | FQEResult | None = None,
) -> EstimateReport:
    """Weighted doubly-robust estimator with self-normalized per-step weights
    and fitted-Q control variates (fitted on the same dataset when ``qhat`` is
    not supplied)."""
    gamma = dataset.gamma if gamma is None else gamma
    if qhat is None:
        qhat = fqe(dataset, pi, gamma=gamma)
    q = qhat.q if isinstance(qhat, FQEResult) else np.asarray(qhat)
    packed = PackedDataset(dataset)
    rho = packed.cumulative_ratios(pi, beta)
    qsa, vst, vafter = _qv_arrays(packed, pi, q)
    g = _partial_horizon_estimates(rho, packed.rewards, qsa, vst, vafter, gamma, strict=True)
    omega = rho[:, -1]
    ess = effective_sample_size(omega) if np.any(omega != 0) else 0.0
    return EstimateReport("wdr", float(g[-1]), ess, None, dataset.n)


def magic_estimate(
    dataset: OfflineDataset,
    pi,
    beta,
    gamma: float | None = None,
    qhat: np.ndarray | FQEResult | None = None,
    horizons: list | None = None,
    n_bootstrap: int = 200,
    percentiles: tuple[float, float] = (10.0, 90.0),
    seed: int = 0,
) -> EstimateReport:
    """Blend of partial-horizon doubly-robust estimates.

    Simplex weights minimize estimated squared bias plus variance: the
    covariance is bootstrapped (``n_bootstrap`` resamples) and the bias of each
    partial estimate is its distance to a percentile interval of the
    bootstrapped full-horizon estimate.  ``horizons`` entries may be ints or
    ``"inf"`` (the full horizon); default is all of 0..T plus "inf".
    """
    gamma = dataset.gamma if gamma is None else gamma
    if qhat is None:
        qhat = fqe(dataset, pi, gamma=gamma)
    q = qhat.q if isinstance(qhat, FQEResult) else np.asarray(qhat)
    packed = PackedDataset(dataset)
    rho = packed.cumulative_ratios(pi, beta)
    qsa, vst, vafter = _qv_arrays(packed, pi, q)
    t_max = packed.t_max

    if horizons is None:
        horizons = list(range(t_max + 1)) + ["inf"]
    idx = [t_max if h in ("inf", None) else min(int(h), t_max) for h in horizons]

    g_full = _partial_horizon_estimates(
        rho, packed.rewards, qsa, vst, vafter, gamma, strict=True
    )
    g = g_full[idx]

    rng = np.random.default_rng(seed)
    boot = np.empty((n_bootstrap, len(idx)))
    boot_inf = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        rows = rng.integers(0, packed.n, size=packed.n)
        gb = _partial_horizon_estimates(
            rho[rows],
            packed.rewards[rows],
            qsa[rows],
            vst[rows],
            vafter[rows],
            gamma,
            strict=False,
        )
        boot[b] = gb[idx]
        boot_inf[b] = gb[-1]

    cov = np.atleast_2d(np.cov(boot, rowvar=False))
    lo, hi = np.percentile(boot_inf, percentiles)
    bias = np.maximum(0.0, np.maximum(lo - g, g - hi))
    omega_mat = cov + np.outer(bias, bias)

    k = len(idx)
    if k == 1:
        x = np.ones(1)
    else:
        res = minimize(
            lambda x: float(x @ omega_mat @ x),
            np.full(k, 1.0 / k),
            jac=lambda x: 2.0 * (omega_mat @ x),
            bounds=[(0.0, 1.0)] * k,
            constraints=[{"type": "eq", "fun": lambda x: x.sum() - 1.0}],
            method="SLSQP",
        )
        x = np.clip(res.x, 0.0, None)
        x = x / x.sum() if x.sum() > 0 else np.full(k, 1.0 / k)

    omega = rho[:, -1]
    ess = effective_sample_size(omega) if np.any(omega != 0) else 0.0
    return EstimateReport("magic", float(x @ g), ess, None, dataset.n)


def gain_estimate(
    dataset: OfflineDataset,
    pi,
    beta,
    gamma: float | None = None,
    ess_mode: str = "weights",
) -> EstimateReport:
    """Behavior-relative gain: mean over trajectories of (omega * g - g).

    Unbiased for the value difference between the target and behavior policy
    on the group the dataset represents.  The report carries the ESS-based
    variance bound; with zero support the ESS is reported as 0 and the bound
    as infinity.
    """
    gamma = dataset.gamma if gamma is None else gamma
    if dataset.n < 1:
        raise ValueError("empty group: gain estimate undefined")
    packed = PackedDataset(dataset)
    omega = packed.cumulative_ratios(pi, beta)[:, -1]
    g = packed.returns(gamma)
    value = float(np.mean(omega * g - g))
    ess_inputs = omega if ess_mode == "weights" else g
    try:
        ess = effective_sample_size(ess_inputs, mode=ess_mode)
    except ValueError:
        ess = 0.0
    bound = gain_variance_bound_from(g, ess, dataset.n)
    return EstimateReport("gain", value, ess, bound, dataset.n)


def gain_variance_bound_from(returns: np.ndarray, ess: float, n: int) -> float:
    """sup|g|^2 * (1/ESS - 1/N), clamped at zero; infinite when ESS is zero."""
    sup = float(np.max(np.abs(returns))) if len(returns) else 0.0
    if ess <= 0.0:
        return float("inf") if sup > 0 else 0.0
    return max(0.0, sup * sup * (1.0 / ess - 1.0 / n))


def gain_variance_bound(
    dataset: OfflineDataset,
    pi,
    beta,
    gamma: float | None = None,
    ess_mode: str = "weights",
) -> float:
    """Variance bound of the gain estimator on this group (see
    :func:`gain_variance_bound_from`)."""
    gamma = dataset.gamma if gamma is None else gamma
    if dataset.n < 1:
        raise ValueError("empty group: variance bound undefined")
    packed = PackedDataset(dataset)
    g = packed.returns(gamma)
    if ess_mode == "weights":
        omega = packed.cumulative_ratios(pi, beta)[:, -1]
        inputs = omega
    else:
        inputs = g
    try:
        ess = effective_sample_size(inputs, mode=ess_mode)
    except ValueError:
        ess = 0.0
    return gain_variance_bound_from(g, ess, dataset.n)


ESTIMATORS = {
    "wis": wis_estimate,
    "pdis": pdis_estimate,
    "fqe": fqe_estimate,
    "wdr": wdr_estimate,
    "magic": magic_estimate,
}


def resample_dataset(dataset: OfflineDataset, indices: np.ndarray) -> OfflineDataset:
    """Bootstrap view of a dataset; participant ids are renumbered because
    resampling with replacement duplicates trajectories."""
    trajs = [
        replace(dataset.trajectories[i], participant_id=pos + 1)
        for pos, i in enumerate(indices)
    ]
    return OfflineDataset(
        trajs, dataset.behavior_policy_id, dataset.gamma, dataset.horizon, dataset.seed
    )


def rrs(
    estimator,
    dataset: OfflineDataset,
    pi,
    beta,
    gamma: float | None = None,
    reps: int = 20,
    seed: int = 0,
    sample_size: int | None = None,
    **kwargs,
) -> EstimateReport:
    """Repeated random sampling with replacement around a base estimator.

    ``estimator`` is a registry id or a callable with the estimator signature.
    Returns the mean of the wrapped estimator over ``reps`` resamples of
    ``sample_size`` (default: the dataset size) trajectories.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    fn = ESTIMATORS[estimator] if isinstance(estimator, str) else estimator
    name = estimator if isinstance(estimator, str) else getattr(fn, "__name__", "custom")
    size = dataset.n if sample_size is None else sample_size
    values, esses = [], []
    for rep in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(rep,)))
        indices = rng.integers(0, dataset.n, size=size)
        resampled = resample_dataset(dataset, indices)
        try:
            report = fn(resampled, pi, beta, gamma=gamma, **kwargs)
        except ValueError as exc:
            raise type(exc)(f"repetition {rep + 1}: {exc}") from exc
        values.append(report.value)
        esses.append(report.ess)
    return EstimateReport(
        f"{name}+rrs", float(np.mean(values)), float(np.mean(esses)), None, dataset.n
    )


def write_estimate_csv(rows, path) -> None:
    """Write (report, policy_id, subgroup) triples in the flat reporting schema."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "policy", "subgroup", "value", "ess", "var_bound", "n"])
        for report, policy_id, subgroup in rows:
            bound = "" if report.variance_bound is None else repr(report.variance_bound)
            writer.writerow(
                [
                    report.estimator_id,
                    policy_id,
                    subgroup,
                    repr(report.value),
                    repr(report.ess),
                    bound,
                    report.n_used,
                ]
            )
