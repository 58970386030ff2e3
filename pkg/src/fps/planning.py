"""Tabular policies, planning, and exact policy evaluation.

Models follow a small protocol (``n_states``, ``n_actions``, ``r_entry``,
``terminal``, ``q_backup``, ``policy_matrix``): rewards are paid on entering a
state and terminal states are absorbing with no further reward.
:class:`DenseModel` implements it for explicit transition tensors; the sepsis
exact model provides branch views with the same surface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mdp import N_STATES, VASO_BIT, discounted_return

_ROW_TOL = 1e-9


@dataclass(frozen=True)
class TabularPolicy:
    """Stochastic action distribution per state."""

    probs: np.ndarray
    id: str

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 2:
            raise ValueError("probs must be a [states x actions] matrix")
        if np.any(probs < -1e-12):
            raise ValueError("action probabilities must be nonnegative")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > _ROW_TOL:
            raise ValueError("policy rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class ValueFunctions:
    """State values and action values of an evaluated policy."""

    v: np.ndarray
    q: np.ndarray


def save_policy(policy: TabularPolicy, path) -> None:
    with open(path, "w") as fh:
        json.dump({"id": policy.id, "probs": policy.probs.tolist()}, fh)
        fh.write("\n")


def load_policy(path) -> TabularPolicy:
    with open(path) as fh:
        d = json.load(fh)
    return TabularPolicy(np.asarray(d["probs"], dtype=np.float64), str(d["id"]))


class DenseModel:
    """Explicit finite MDP: transition tensor p[s, a, s'], rewards on entry."""

    def __init__(
        self,
        p: np.ndarray,
        r_entry: np.ndarray,
        terminal: np.ndarray,
        admission: np.ndarray | None = None,
    ):
        self.p = np.asarray(p, dtype=np.float64)
        self.r_entry = np.asarray(r_entry, dtype=np.float64)
        self.terminal = np.asarray(terminal, dtype=bool)
        self.n_states, self.n_actions = self.p.shape[:2]
        self.admission = admission if admission is None else np.asarray(admission)

    def check_stochastic(self) -> None:
        sums = self.p.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > _ROW_TOL:
            bad = np.argwhere(np.abs(sums - 1.0) > _ROW_TOL)[0]
            raise ValueError(f"transition row (s={bad[0]}, a={bad[1]}) does not sum to 1")

    def q_backup(self, v: np.ndarray, gamma: float) -> np.ndarray:
        # Termination gates continuation through the entered state; the current
        # state may itself satisfy the terminal predicate (e.g. as an episode
        # start) and still has a well-defined backup.
        cont = np.where(self.terminal, 0.0, v)
        w = self.r_entry + gamma * cont
        return self.p @ w

    def policy_matrix(self, probs: np.ndarray) -> np.ndarray:
        return np.einsum("sa,sat->st", probs, self.p)


def policy_evaluation(model, probs: np.ndarray, gamma: float) -> np.ndarray:
    """Infinite-horizon state values by solving the linear fixed-point system.

    Raises ``ValueError`` on a singular system (e.g. gamma = 1 with states that
    never reach a terminal).
    """
    n = model.n_states
    q0 = model.q_backup(np.zeros(n), gamma)
    r_bar = np.einsum("sa,sa->s", probs, q0)
    mat = model.policy_matrix(probs)
    cont = mat * (~model.terminal)[None, :]
    a = np.eye(n) - gamma * cont
    try:
        v = np.linalg.solve(a, r_bar)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular policy-evaluation system: {exc}") from exc
    if not np.all(np.isfinite(v)):
        raise ValueError("singular policy-evaluation system: non-finite solution")
    return v


def finite_horizon_values(model, probs: np.ndarray, gamma: float, horizon: int) -> np.ndarray:
    """State values of a policy over exactly ``horizon`` steps (backward induction)."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    v = np.zeros(model.n_states)
    for _ in range(horizon):
        q = model.q_backup(v, gamma)
        v = np.einsum("sa,sa->s", probs, q)
    return v


def greedy_policy(q: np.ndarray, policy_id: str = "greedy") -> TabularPolicy:
    probs = np.zeros_like(q)
    probs[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return TabularPolicy(probs, policy_id)


def policy_iteration(
    model, gamma: float, max_iters: int = 1000, policy_id: str = "pi"
) -> tuple[TabularPolicy, ValueFunctions]:
    """Exact policy iteration to a greedy-stable optimal policy.

    The returned values satisfy a sup-norm Bellman residual of at most 1e-10.
    """
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must lie in (0, 1) for policy iteration")
    if hasattr(model, "check_stochastic"):
        model.check_stochastic()
    n, m = model.n_states, model.n_actions
    probs = np.full((n, m), 1.0 / m)
    actions = None
    for _ in range(max_iters):
        v = policy_evaluation(model, probs, gamma)
        q = model.q_backup(v, gamma)
        new_actions = np.argmax(q, axis=1)
        if actions is not None:
            # Keep the incumbent action on numerical ties; otherwise exact ties
            # can cycle forever without improving the value.
            keep = q[np.arange(n), actions] >= q[np.arange(n), new_actions] - 1e-12
            new_actions = np.where(keep, actions, new_actions)
            if np.array_equal(new_actions, actions):
                break
        actions = new_actions
        probs = np.zeros((n, m))
        probs[np.arange(n), actions] = 1.0
    v = policy_evaluation(model, probs, gamma)
    q = model.q_backup(v, gamma)
    residual = np.max(np.abs(np.max(q, axis=1) - v))
    if residual > 1e-10:
        raise RuntimeError(f"policy iteration did not converge (residual {residual:.2e})")
    return TabularPolicy(probs, policy_id), ValueFunctions(v=v, q=q)


def soften(policy: TabularPolicy, eps: float = 0.05) -> TabularPolicy:
    """Mix a policy with the uniform policy: (1 - eps) * p + eps / |A|."""
    if not (0.0 <= eps <= 1.0):
        raise ValueError("eps must lie in [0, 1]")
    m = policy.n_actions
    probs = (1.0 - eps) * policy.probs + eps / m
    return TabularPolicy(probs, f"{policy.id}-soft" if eps > 0 else policy.id)


def vaso_flip(policy: TabularPolicy, policy_id: str | None = None) -> TabularPolicy:
    """Toggle the vasopressor bit of every action (an involution on policies)."""
    perm = np.arange(policy.n_actions) ^ VASO_BIT
    return TabularPolicy(policy.probs[:, perm], policy_id or f"{policy.id}-vasoflip")


def behavior_mixture(soft_opt: TabularPolicy, flip_weight: float = 0.15) -> TabularPolicy:
    """Behavioral policy: mostly the near-optimal policy, with a minority
    component whose vasopressor decision is inverted."""
    flipped = vaso_flip(soft_opt)
    probs = (1.0 - flip_weight) * soft_opt.probs + flip_weight * flipped.probs
    return TabularPolicy(probs, "behavior")


def _admission_like_states(n_states: int) -> np.ndarray:
    if n_states != N_STATES:
        raise ValueError("antibiotic-constrained policies are defined on the sepsis state space")
    # Flags occupy the high mixed-radix digits: all three off <=> index < 180.
    return np.arange(n_states) < 180


def _constrain_antibiotics(base: TabularPolicy, force_on: bool, scope: str, policy_id: str):
    probs = base.probs.copy()
    if scope == "admission":
        rows = _admission_like_states(base.n_states)
    elif scope == "always":
        rows = np.ones(base.n_states, dtype=bool)
    else:
        raise ValueError(f"unknown scope: {scope}")
    a = np.arange(base.n_actions)
    off_actions = a[(a & 1) == 0]
    on_actions = off_actions | 1
    sub = probs[rows]
    if force_on:
        sub[:, on_actions] += sub[:, off_actions]
        sub[:, off_actions] = 0.0
    else:
        sub[:, off_actions] += sub[:, on_actions]
        sub[:, on_actions] = 0.0
    probs[rows] = sub
    return TabularPolicy(probs, policy_id)


def make_wa(base: TabularPolicy, scope: str = "admission") -> TabularPolicy:
    """Always administer antibiotics at admission-like states (all flags off)."""
    return _constrain_antibiotics(base, force_on=True, scope=scope, policy_id="wa")


def make_woa(base: TabularPolicy, scope: str = "admission") -> TabularPolicy:
    """Withhold antibiotics at admission-like states (all flags off)."""
    return _constrain_antibiotics(base, force_on=False, scope=scope, policy_id="woa")


def state_values(
    policy: TabularPolicy,
    model,
    gamma: float | None = None,
    horizon: int | None = None,
) -> np.ndarray:
    """Comorbidity-weighted per-state values of a policy on the sepsis model.

    ``horizon=None`` solves the infinite-horizon system instead of running
    backward induction.
    """
    gamma = model.gamma if gamma is None else gamma
    v = np.zeros(model.n_states)
    for weight, b in model.branch_weights():
        if weight == 0.0:
            continue
        view = model.branch_view(b)
        if horizon is None:
            vb = policy_evaluation(view, policy.probs, gamma)
        else:
            vb = finite_horizon_values(view, policy.probs, gamma, horizon)
        v += weight * vb
    return v


def true_value(
    policy: TabularPolicy,
    sim,
    gamma: float | None = None,
    horizon: int | str = "config",
    mode: str = "exact",
    n: int = 100_000,
    seed: int = 0,
) -> float:
    """Ground-truth value of a policy from the admission distribution.

    ``exact`` conditions on each comorbidity branch and mixes by prevalence;
    ``monte_carlo`` averages discounted returns over ``n`` simulated episodes.
    """
    gamma = sim.config.gamma if gamma is None else gamma
    if mode == "exact":
        model = sim.exact_model()
        h = sim.config.horizon if horizon == "config" else horizon
        v = state_values(policy, model, gamma=gamma, horizon=h)
        return float(model.admission @ v)
    if mode == "monte_carlo":
        total = 0.0
        for pid in range(1, n + 1):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(pid,)))
            traj = sim.rollout(policy, rng, participant_id=pid)
            total += discounted_return(traj, gamma)
        return total / n
    raise ValueError(f"unknown mode: {mode}")


def symptom_policy(n_states: int = N_STATES, policy_id: str = "symptom") -> TabularPolicy:
    """Deterministic symptom-triggered treatment heuristic.

    Antibiotics while heart rate is abnormal or blood pressure is high,
    vasopressors while blood pressure is low, ventilation while oxygen is low;
    all treatments stop once every vital is normal (seeking discharge).
    """
    from .mdp import HIGH, LOW, O2_LOW, decode_state, encode_action, TreatmentAction

    probs = np.zeros((n_states, 8))
    for idx in range(n_states):
        s = decode_state(idx)
        abx = s.heart_rate != 1 or s.blood_pressure == HIGH
        vaso = s.blood_pressure == LOW
        vent = s.oxygen == O2_LOW
        probs[idx, encode_action(TreatmentAction(abx, vaso, vent))] = 1.0
    return TabularPolicy(probs, policy_id)


def sepsis_policy_suite(
    sim, eps: float = 0.05, planning: str = "nominal"
) -> dict[str, TabularPolicy]:
    """Behavior and candidate policies used by the sepsis benchmark.

    The policy-iteration candidate is trained on the comorbidity-free
    dynamics: the hidden comorbidity is an unrecorded overlay on the cohort
    that the policy designer does not know about.  ``planning="marginal"``
    instead plans on the prevalence-weighted mixture.  The antibiotic-forcing
    and antibiotic-withholding candidates are admission-constrained variants
    of a softened symptom-triggered heuristic, and the behavioral policy is
    the standard mixture of the softened optimum with its vasopressor-flipped
    twin.
    """
    model = sim.exact_model()
    branch = 0 if planning == "nominal" else None
    pi_det, _ = policy_iteration(
        model.branch_view(branch), sim.config.gamma, policy_id="pi-greedy"
    )
    soft_opt = TabularPolicy(soften(pi_det, eps).probs, "pi")
    # Conservative base for the antibiotic-constrained candidates: planned on
    # the comorbid branch, i.e. assuming antibiotics are unreliable.
    conservative, _ = policy_iteration(
        model.branch_view(1), sim.config.gamma, policy_id="conservative"
    )
    soft_conservative = soften(conservative, eps)
    return {
        "pi": soft_opt,
        "wa": make_wa(soft_conservative),
        "woa": make_woa(soft_conservative),
        "behavior": behavior_mixture(soft_opt),
        "pi_greedy": pi_det,
    }
