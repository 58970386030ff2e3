"""Core domain types: factored patient states, treatment actions, trajectories
and offline datasets, plus JSONL (de)serialization.

The patient state is a mixed-radix tuple of four vitals, a diabetes flag and
three treatment-on flags; its canonical integer encoding covers exactly 1440
states.  Trajectories store per-step ``(state, action, reward)`` triples as
integer/float arrays together with the state observed after the final step.
All types are immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

# Ordinal levels for the vitals.  ``LOW/NORMAL/HIGH`` apply to heart rate and
# blood pressure, oxygen only distinguishes low vs normal, glucose has five
# levels centered on GLU_NORMAL.
LOW, NORMAL, HIGH = 0, 1, 2
O2_LOW, O2_NORMAL = 0, 1
GLU_VERY_LOW, GLU_LOW, GLU_NORMAL, GLU_HIGH, GLU_VERY_HIGH = 0, 1, 2, 3, 4

HR_LEVELS = 3
BP_LEVELS = 3
O2_LEVELS = 2
GLU_LEVELS = 5

N_STATES = HR_LEVELS * BP_LEVELS * O2_LEVELS * GLU_LEVELS * 2 * 2 * 2 * 2  # 1440
N_ACTIONS = 8

# Action bit layout: antibiotics = bit 0, vasopressors = bit 1, ventilation = bit 2.
ABX_BIT, VASO_BIT, VENT_BIT = 1, 2, 4


@dataclass(frozen=True)
class SepsisState:
    """Factored patient state.

    Vitals are ordinal levels; ``diabetic`` is a static patient attribute and
    the three ``*_on`` flags record which treatments were applied on the step
    that produced this state.
    """

    heart_rate: int
    blood_pressure: int
    oxygen: int
    glucose: int
    diabetic: bool
    abx_on: bool = False
    vaso_on: bool = False
    vent_on: bool = False

    def __post_init__(self):
        if not (0 <= self.heart_rate < HR_LEVELS):
            raise ValueError(f"heart_rate out of range: {self.heart_rate}")
        if not (0 <= self.blood_pressure < BP_LEVELS):
            raise ValueError(f"blood_pressure out of range: {self.blood_pressure}")
        if not (0 <= self.oxygen < O2_LEVELS):
            raise ValueError(f"oxygen out of range: {self.oxygen}")
        if not (0 <= self.glucose < GLU_LEVELS):
            raise ValueError(f"glucose out of range: {self.glucose}")

    @property
    def vitals(self) -> tuple[int, int, int, int]:
        return (self.heart_rate, self.blood_pressure, self.oxygen, self.glucose)

    def n_abnormal_vitals(self) -> int:
        return (
            int(self.heart_rate != NORMAL)
            + int(self.blood_pressure != NORMAL)
            + int(self.oxygen != O2_NORMAL)
            + int(self.glucose != GLU_NORMAL)
        )

    def all_vitals_normal(self) -> bool:
        return self.n_abnormal_vitals() == 0

    def no_treatment_on(self) -> bool:
        return not (self.abx_on or self.vaso_on or self.vent_on)


@dataclass(frozen=True)
class TreatmentAction:
    """Combination of three binary treatments."""

    antibiotics: bool
    vasopressors: bool
    ventilation: bool


def encode_state(s: SepsisState) -> int:
    """Canonical mixed-radix index of a state.

    Digit order (fastest first): heart_rate, blood_pressure, oxygen, glucose,
    diabetic, abx_on, vaso_on, vent_on.  The resulting index lies in
    ``[0, 1440)``; this layout is fixed so serialized datasets stay portable.
    """
    index = int(s.vent_on)
    index = int(s.vaso_on) + 2 * index
    index = int(s.abx_on) + 2 * index
    index = int(s.diabetic) + 2 * index
    index = s.glucose + GLU_LEVELS * index
    index = s.oxygen + O2_LEVELS * index
    index = s.blood_pressure + BP_LEVELS * index
    index = s.heart_rate + HR_LEVELS * index
    return index


def decode_state(index: int) -> SepsisState:
    """Inverse of :func:`encode_state`."""
    if not (0 <= index < N_STATES):
        raise ValueError(f"state index out of range: {index}")
    i = index
    hr, i = i % HR_LEVELS, i // HR_LEVELS
    bp, i = i % BP_LEVELS, i // BP_LEVELS
    o2, i = i % O2_LEVELS, i // O2_LEVELS
    glu, i = i % GLU_LEVELS, i // GLU_LEVELS
    diab, i = i % 2, i // 2
    abx, i = i % 2, i // 2
    vaso, i = i % 2, i // 2
    vent = i % 2
    return SepsisState(hr, bp, o2, glu, bool(diab), bool(abx), bool(vaso), bool(vent))


def encode_action(a: TreatmentAction) -> int:
    return (
        int(a.antibiotics) * 1 + int(a.vasopressors) * 2 + int(a.ventilation) * 4
    )


def decode_action(index: int) -> TreatmentAction:
    if not (0 <= index < N_ACTIONS):
        raise ValueError(f"action index out of range: {index}")
    return TreatmentAction(bool(index & ABX_BIT), bool(index & VASO_BIT), bool(index & VENT_BIT))


@dataclass(frozen=True)
class Trajectory:
    """One participant's logged episode.

    ``states[t]`` is the state in which ``actions[t]`` was taken and
    ``rewards[t]`` the reward received for it; ``terminal_state`` is the state
    observed after the final step.  ``terminated_early`` distinguishes episodes
    ended by the environment from episodes cut off at the horizon.
    """

    participant_id: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal_state: int
    terminated_early: bool
    synthetic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int64))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int64))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float64))
        if len(self.states) == 0:
            raise ValueError("trajectory must contain at least one step")
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise ValueError("states/actions/rewards length mismatch")

    def __len__(self) -> int:
        return len(self.states)


def discounted_return(traj: Trajectory, gamma: float) -> float:
    """Discounted sum of the logged rewards, first step undiscounted."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    discounts = gamma ** np.arange(len(traj))
    return float(np.dot(discounts, traj.rewards))


@dataclass(frozen=True)
class OfflineDataset:
    """A behavioral-policy trajectory collection with unique participant ids."""

    trajectories: list[Trajectory]
    behavior_policy_id: str
    gamma: float
    horizon: int
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        ids = [t.participant_id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate participant_id(s): {dupes[:5]}")

    @property
    def n(self) -> int:
        return len(self.trajectories)

    def returns(self, gamma: float | None = None) -> np.ndarray:
        g = self.gamma if gamma is None else gamma
        return np.array([discounted_return(t, g) for t in self.trajectories])

    def subset(self, indices: Iterable[int]) -> "OfflineDataset":
        """Dataset restricted to the given trajectory positions (ids kept)."""
        trajs = [self.trajectories[i] for i in indices]
        return OfflineDataset(trajs, self.behavior_policy_id, self.gamma, self.horizon, self.seed)


def _traj_record(t: Trajectory) -> dict:
    rec = {
        "id": int(t.participant_id),
        "steps": [
            {"s": int(s), "a": int(a), "r": float(r)}
            for s, a, r in zip(t.states, t.actions, t.rewards)
        ],
        "terminal_s": int(t.terminal_state),
        "early": bool(t.terminated_early),
    }
    if t.synthetic:
        rec["synthetic"] = True
    return rec


def save_dataset(dataset: OfflineDataset, path) -> None:
    """Write a dataset as JSONL: a meta header line, then one trajectory per line."""
    meta = {
        "meta": {
            "gamma": float(dataset.gamma),
            "horizon": int(dataset.horizon),
            "behavior": dataset.behavior_policy_id,
            "seed": int(dataset.seed),
        }
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(meta, separators=(",", ":")) + "\n")
        for t in dataset.trajectories:
            fh.write(json.dumps(_traj_record(t), separators=(",", ":")) + "\n")


def load_dataset(path) -> OfflineDataset:
    """Read a JSONL dataset written by :func:`save_dataset`.

    Malformed lines raise ``ValueError`` naming the 1-based line number;
    duplicate participant ids are rejected.  An empty file yields an empty
    dataset with default metadata.
    """
    meta = {"gamma": 1.0, "horizon": 1, "behavior": "", "seed": 0}
    trajectories: list[Trajectory] = []
    seen_ids: set[int] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if "meta" in rec:
                meta.update(rec["meta"])
                continue
            try:
                pid = int(rec["id"])
                steps = rec["steps"]
                states = [int(st["s"]) for st in steps]
                actions = [int(st["a"]) for st in steps]
                rewards = [float(st["r"]) for st in steps]
                traj = Trajectory(
                    participant_id=pid,
                    states=states,
                    actions=actions,
                    rewards=rewards,
                    terminal_state=int(rec["terminal_s"]),
                    terminated_early=bool(rec["early"]),
                    synthetic=bool(rec.get("synthetic", False)),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed trajectory record: {exc}") from exc
            if pid in seen_ids:
                raise ValueError(f"{path}:{lineno}: duplicate participant_id {pid}")
            seen_ids.add(pid)
            trajectories.append(traj)
    return OfflineDataset(
        trajectories,
        behavior_policy_id=str(meta["behavior"]),
        gamma=float(meta["gamma"]),
        horizon=int(meta["horizon"]),
        seed=int(meta["seed"]),
    )
