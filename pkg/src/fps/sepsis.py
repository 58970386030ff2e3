"""Simulated sepsis-treatment environment.

A patient is admitted with sampled vitals and evolves for at most ``horizon``
steps under three binary treatments.  Antibiotics push high heart rate and
high blood pressure back to normal, vasopressors raise blood pressure,
ventilation restores oxygen; withdrawing a treatment can rebound the vital it
was holding, untreated abnormal vitals recover slowly on their own, and
glucose fluctuates (more for diabetics).  A hidden per-admission comorbidity
attenuates antibiotic effectiveness and is never written into the state.

An episode ends with reward +1 when all vitals are normal and no treatment
was applied on the step (discharge), and with reward -1 when at least three
vitals leave the normal range (death).  Every transition factorizes over the
four vitals, so the simulator and the exact transition tensor are built from
the same per-vital kernel tables.

The per-step transition constants are free parameters of
:class:`SepsisDynamicsConfig`; the defaults below are this package's
documented choices, not values taken from any external source.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from functools import cached_property

import numpy as np

from .mdp import (
    GLU_LEVELS,
    GLU_NORMAL,
    HIGH,
    HR_LEVELS,
    LOW,
    N_ACTIONS,
    N_STATES,
    NORMAL,
    O2_LOW,
    O2_NORMAL,
    OfflineDataset,
    SepsisState,
    Trajectory,
    TreatmentAction,
    decode_action,
    decode_state,
    encode_state,
)

N_VITAL_COMBOS = 3 * 3 * 2 * 5  # reachable next-state core per (state, action)


@dataclass(frozen=True)
class SepsisDynamicsConfig:
    """All transition, comorbidity and admission constants of the simulator.

    Probabilities are per step.  ``comorbidity_abx_attenuation`` multiplies the
    antibiotic success probabilities for comorbid patients; the comorbidity
    itself is drawn once per admission with ``comorbidity_prevalence`` and is
    unobservable.
    """

    # Treatment effects.
    abx_heart_rate: float = 0.5
    abx_blood_pressure: float = 0.5
    vaso_bp_low_up: float = 0.7
    vaso_bp_normal_up: float = 0.2
    vaso_bp_low_up_diabetic: float = 0.5
    vaso_bp_low_overshoot_diabetic: float = 0.4
    vaso_bp_normal_up_diabetic: float = 0.9
    vent_oxygen: float = 0.7
    # Withdrawal rebound, applied when a treatment flag is on but the chosen
    # action turns that treatment off.
    withdraw_abx_heart_rate: float = 0.1
    withdraw_abx_blood_pressure: float = 0.3
    withdraw_vaso_blood_pressure: float = 0.1
    withdraw_vent_oxygen: float = 0.1
    # Untreated drift: abnormal vitals recover one level, normal vitals
    # destabilize one level (split evenly when two directions exist).
    drift_to_normal: float = 0.1
    drift_from_normal: float = 0.1
    # Glucose fluctuation (one level per step, direction uniform).
    glucose_fluctuation: float = 0.1
    glucose_fluctuation_diabetic: float = 0.3
    # Antibiotics dysregulate glucose while administered: it drifts away from
    # normal at the ``away`` rate (per direction) and recovers only at the
    # ``toward`` rate.  This is the clinical cost of unnecessary antibiotics
    # and is a chemical exposure effect, so it is not attenuated by
    # comorbidity.
    glucose_abx_away: float = 0.3
    glucose_abx_away_diabetic: float = 0.4
    glucose_abx_toward: float = 0.05
    # Hidden comorbidity: for comorbid patients the antibiotic effect on heart
    # rate and blood pressure is a mixture of the nominal effect (weight
    # kappa) and the untreated dynamics (weight 1 - kappa).
    comorbidity_prevalence: float = 0.3
    comorbidity_abx_attenuation: float = 0.2
    # Admission distribution; all treatment flags start off.
    diabetic_prevalence: float = 0.2
    admission_heart_rate: tuple = (0.25, 0.5, 0.25)
    admission_blood_pressure: tuple = (0.25, 0.5, 0.25)
    admission_oxygen: tuple = (0.2, 0.8)
    admission_glucose: tuple = (0.05, 0.15, 0.6, 0.15, 0.05)
    admission_glucose_diabetic: tuple = (0.1, 0.2, 0.4, 0.2, 0.1)
    # Episode structure.
    horizon: int = 5
    gamma: float = 0.99

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        for name, value in asdict(self).items():
            if isinstance(value, float) and not (name == "gamma") and not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        for name, probs, size in [
            ("admission_heart_rate", self.admission_heart_rate, HR_LEVELS),
            ("admission_blood_pressure", self.admission_blood_pressure, 3),
            ("admission_oxygen", self.admission_oxygen, 2),
            ("admission_glucose", self.admission_glucose, GLU_LEVELS),
            ("admission_glucose_diabetic", self.admission_glucose_diabetic, GLU_LEVELS),
        ]:
            if len(probs) != size or abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
                raise ValueError(f"{name} must be a {size}-way distribution")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SepsisDynamicsConfig":
        d = dict(d)
        for key in (
            "admission_heart_rate",
            "admission_blood_pressure",
            "admission_oxygen",
            "admission_glucose",
            "admission_glucose_diabetic",
        ):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SepsisDynamicsConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def override(self, **kwargs) -> "SepsisDynamicsConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class PatientContext:
    """Hidden per-admission attributes, never recorded in trajectories."""

    comorbid: bool


def is_dead(state: SepsisState) -> bool:
    return state.n_abnormal_vitals() >= 3


def is_discharged(state: SepsisState) -> bool:
    return state.all_vitals_normal() and state.no_treatment_on()


def is_terminal(state: SepsisState) -> bool:
    return is_dead(state) or is_discharged(state)


def terminal_state_index(index: int) -> bool:
    """Terminal predicate on a canonical state index."""
    return is_terminal(decode_state(index))


def _move_toward(level: int, normal: int) -> int:
    return level + (1 if level < normal else -1)


def _sample_categorical(probs: np.ndarray, u: float) -> int:
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if u < acc:
            return i
    return len(probs) - 1


class SepsisSim:
    """Sampling simulator and exact-model factory for one dynamics config."""

    def __init__(self, config: SepsisDynamicsConfig | None = None):
        self.config = config or SepsisDynamicsConfig()
        self._build_kernels()

    # ------------------------------------------------------------------
    # Per-vital kernel tables.  Exactly one mechanism updates each vital per
    # step, chosen by precedence: active treatment > withdrawal > untreated.
    # ------------------------------------------------------------------

    def _build_kernels(self) -> None:
        c = self.config
        kappa = c.comorbidity_abx_attenuation

        def drift3(lvl: int) -> np.ndarray:
            """Untreated drift for a 3-level vital."""
            d = np.zeros(3)
            if lvl == NORMAL:
                d[LOW] += c.drift_from_normal / 2
                d[HIGH] += c.drift_from_normal / 2
                d[NORMAL] += 1 - c.drift_from_normal
            else:
                d[_move_toward(lvl, NORMAL)] += c.drift_to_normal
                d[lvl] += 1 - c.drift_to_normal
            return d

        def abx3(lvl: int, eff: float) -> np.ndarray:
            """Nominal antibiotic effect: clears high levels, holds normal."""
            d = np.zeros(3)
            if lvl == HIGH:
                d[NORMAL] += eff
                d[HIGH] += 1 - eff
            elif lvl == LOW:
                d[NORMAL] += c.drift_to_normal
                d[LOW] += 1 - c.drift_to_normal
            else:
                d[NORMAL] = 1.0
            return d

        def rebound3(lvl: int, prob: float) -> np.ndarray:
            """Withdrawal rebound: normal jumps high, abnormal drifts back."""
            d = np.zeros(3)
            if lvl == NORMAL:
                d[HIGH] += prob
                d[NORMAL] += 1 - prob
            else:
                d[_move_toward(lvl, NORMAL)] += c.drift_to_normal
                d[lvl] += 1 - c.drift_to_normal
            return d

        # hr_tab[comorbid, abx, abx_was, level] -> distribution over 3 levels
        hr = np.zeros((2, 2, 2, 3, 3))
        for b in range(2):
            mix = 1.0 if b == 0 else kappa
            for abx in range(2):
                for was in range(2):
                    for lvl in range(3):
                        if abx:
                            d = mix * abx3(lvl, c.abx_heart_rate) + (1 - mix) * drift3(lvl)
                        elif was:
                            d = rebound3(lvl, c.withdraw_abx_heart_rate)
                        else:
                            d = drift3(lvl)
                        hr[b, abx, was, lvl] = d
        self._hr_tab = hr

        # bp_tab[comorbid, diabetic, abx, vaso, abx_was, vaso_was, level]
        # Precedence per step: vasopressors > vaso withdrawal > antibiotics >
        # abx withdrawal > untreated.
        bp = np.zeros((2, 2, 2, 2, 2, 2, 3, 3))
        for b in range(2):
            mix = 1.0 if b == 0 else kappa
            for diab in range(2):
                for abx in range(2):
                    for vaso in range(2):
                        for abx_was in range(2):
                            for vaso_was in range(2):
                                for lvl in range(3):
                                    d = np.zeros(3)
                                    if vaso:
                                        if lvl == LOW:
                                            if diab:
                                                d[NORMAL] += c.vaso_bp_low_up_diabetic
                                                d[HIGH] += c.vaso_bp_low_overshoot_diabetic
                                                d[LOW] += (
                                                    1
                                                    - c.vaso_bp_low_up_diabetic
                                                    - c.vaso_bp_low_overshoot_diabetic
                                                )
                                            else:
                                                d[NORMAL] += c.vaso_bp_low_up
                                                d[LOW] += 1 - c.vaso_bp_low_up
                                        elif lvl == NORMAL:
                                            up = (
                                                c.vaso_bp_normal_up_diabetic
                                                if diab
                                                else c.vaso_bp_normal_up
                                            )
                                            d[HIGH] += up
                                            d[NORMAL] += 1 - up
                                        else:  # HIGH: antibiotics may still act
                                            if abx:
                                                stay = np.zeros(3)
                                                stay[HIGH] = 1.0
                                                d += mix * abx3(lvl, c.abx_blood_pressure)
                                                d += (1 - mix) * stay
                                            else:
                                                d[HIGH] = 1.0
                                    elif vaso_was:
                                        if lvl == LOW:
                                            d[LOW] = 1.0
                                        else:
                                            d[lvl - 1] += c.withdraw_vaso_blood_pressure
                                            d[lvl] += 1 - c.withdraw_vaso_blood_pressure
                                    elif abx:
                                        d += mix * abx3(lvl, c.abx_blood_pressure)
                                        d += (1 - mix) * drift3(lvl)
                                    elif abx_was:
                                        d = rebound3(lvl, c.withdraw_abx_blood_pressure)
                                    else:
                                        d = drift3(lvl)
                                    bp[b, diab, abx, vaso, abx_was, vaso_was, lvl] = d
        self._bp_tab = bp

        # o2_tab[vent, vent_was, level]
        o2 = np.zeros((2, 2, 2, 2))
        for vent in range(2):
            for was in range(2):
                for lvl in range(2):
                    d = o2[vent, was, lvl]
                    if vent:
                        if lvl == O2_LOW:
                            d[O2_NORMAL] += c.vent_oxygen
                            d[O2_LOW] += 1 - c.vent_oxygen
                        else:
                            d[O2_NORMAL] = 1.0
                    elif was:
                        if lvl == O2_NORMAL:
                            d[O2_LOW] += c.withdraw_vent_oxygen
                            d[O2_NORMAL] += 1 - c.withdraw_vent_oxygen
                        else:
                            d[O2_NORMAL] += c.drift_to_normal
                            d[O2_LOW] += 1 - c.drift_to_normal
                    else:
                        if lvl == O2_NORMAL:
                            d[O2_LOW] += c.drift_from_normal
                            d[O2_NORMAL] += 1 - c.drift_from_normal
                        else:
                            d[O2_NORMAL] += c.drift_to_normal
                            d[O2_LOW] += 1 - c.drift_to_normal
        self._o2_tab = o2

        # glu_tab[diabetic, abx, level].  Untreated glucose fluctuates
        # symmetrically; under antibiotics it drifts away from normal at the
        # ``away`` rate per direction and recovers only at the ``toward`` rate.
        glu = np.zeros((2, 2, 5, 5))
        for diab in range(2):
            away = c.glucose_abx_away_diabetic if diab else c.glucose_abx_away
            f = c.glucose_fluctuation_diabetic if diab else c.glucose_fluctuation
            for abx in range(2):
                for lvl in range(5):
                    d = glu[diab, abx, lvl]
                    if abx:
                        if lvl == GLU_NORMAL:
                            d[lvl - 1] += away / 2
                            d[lvl + 1] += away / 2
                        elif lvl < GLU_NORMAL:
                            if lvl > 0:
                                d[lvl - 1] += away / 2
                            d[lvl + 1] += c.glucose_abx_toward
                        else:
                            if lvl < 4:
                                d[lvl + 1] += away / 2
                            d[lvl - 1] += c.glucose_abx_toward
                    else:
                        if lvl > 0:
                            d[lvl - 1] += f / 2
                        if lvl < 4:
                            d[lvl + 1] += f / 2
                    d[lvl] += 1 - d.sum()
        self._glu_tab = glu

    def _vital_dists(self, s: SepsisState, a: TreatmentAction, comorbid: bool):
        b = int(comorbid)
        hr_d = self._hr_tab[b, int(a.antibiotics), int(s.abx_on), s.heart_rate]
        bp_d = self._bp_tab[
            b,
            int(s.diabetic),
            int(a.antibiotics),
            int(a.vasopressors),
            int(s.abx_on),
            int(s.vaso_on),
            s.blood_pressure,
        ]
        o2_d = self._o2_tab[int(a.ventilation), int(s.vent_on), s.oxygen]
        glu_d = self._glu_tab[int(s.diabetic), int(a.antibiotics), s.glucose]
        return hr_d, bp_d, o2_d, glu_d

    # ------------------------------------------------------------------
    # Sampling interface
    # ------------------------------------------------------------------

    def sample_initial(self, rng: np.random.Generator) -> tuple[SepsisState, PatientContext]:
        """Draw an admission state (all treatment flags off) and hidden context.

        The draw always consumes the same number of uniforms regardless of the
        configured prevalences, so seed streams stay aligned across configs.
        """
        c = self.config
        comorbid = rng.random() < c.comorbidity_prevalence
        diabetic = rng.random() < c.diabetic_prevalence
        hr = _sample_categorical(np.asarray(c.admission_heart_rate), rng.random())
        bp = _sample_categorical(np.asarray(c.admission_blood_pressure), rng.random())
        o2 = _sample_categorical(np.asarray(c.admission_oxygen), rng.random())
        glu_dist = c.admission_glucose_diabetic if diabetic else c.admission_glucose
        glu = _sample_categorical(np.asarray(glu_dist), rng.random())
        state = SepsisState(hr, bp, o2, glu, diabetic)
        return state, PatientContext(comorbid=comorbid)

    def step(
        self,
        state: SepsisState,
        ctx: PatientContext,
        action: TreatmentAction,
        rng: np.random.Generator,
    ) -> tuple[SepsisState, str, float]:
        """One transition; returns (next_state, terminal, reward).

        ``terminal`` is one of ``"none"``, ``"discharged"``, ``"deceased"``.
        The next state's treatment flags equal the action's bits.
        """
        hr_d, bp_d, o2_d, glu_d = self._vital_dists(state, action, ctx.comorbid)
        hr = _sample_categorical(hr_d, rng.random())
        bp = _sample_categorical(bp_d, rng.random())
        o2 = _sample_categorical(o2_d, rng.random())
        glu = _sample_categorical(glu_d, rng.random())
        nxt = SepsisState(
            hr,
            bp,
            o2,
            glu,
            state.diabetic,
            abx_on=action.antibiotics,
            vaso_on=action.vasopressors,
            vent_on=action.ventilation,
        )
        if is_dead(nxt):
            return nxt, "deceased", -1.0
        if is_discharged(nxt):
            return nxt, "discharged", 1.0
        return nxt, "none", 0.0

    def rollout(self, policy, rng: np.random.Generator, participant_id: int = 1) -> Trajectory:
        """Simulate one episode under a tabular policy; hidden context is not recorded."""
        state, ctx = self.sample_initial(rng)
        states, actions, rewards = [], [], []
        terminated_early = False
        terminal_index = -1
        for _ in range(self.config.horizon):
            s_idx = encode_state(state)
            a_idx = _sample_categorical(policy.probs[s_idx], rng.random())
            nxt, terminal, reward = self.step(state, ctx, decode_action(a_idx), rng)
            states.append(s_idx)
            actions.append(a_idx)
            rewards.append(reward)
            terminal_index = encode_state(nxt)
            state = nxt
            if terminal != "none":
                terminated_early = True
                break
        return Trajectory(
            participant_id=participant_id,
            states=states,
            actions=actions,
            rewards=rewards,
            terminal_state=terminal_index,
            terminated_early=terminated_early,
        )

    def generate_dataset(self, policy, n: int, seed: int) -> OfflineDataset:
        """n independent episodes with per-participant seed streams.

        Stream i is derived from (seed, participant_id) alone, so growing n
        leaves earlier trajectories unchanged.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        trajectories = []
        for pid in range(1, n + 1):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(pid,)))
            trajectories.append(self.rollout(policy, rng, participant_id=pid))
        return OfflineDataset(
            trajectories,
            behavior_policy_id=policy.id,
            gamma=self.config.gamma,
            horizon=self.config.horizon,
            seed=seed,
        )

    def sample_admissions(self, n: int, seed: int) -> list[tuple[int, PatientContext]]:
        """Fresh arrival cohort: (state index, hidden context) pairs."""
        out = []
        for pid in range(1, n + 1):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(pid,)))
            state, ctx = self.sample_initial(rng)
            out.append((encode_state(state), ctx))
        return out

    # ------------------------------------------------------------------
    # Exact model
    # ------------------------------------------------------------------

    def admission_distribution(self) -> np.ndarray:
        """Marginal admission distribution over all 1440 state indices."""
        c = self.config
        dist = np.zeros(N_STATES)
        for diab in range(2):
            p_diab = c.diabetic_prevalence if diab else 1 - c.diabetic_prevalence
            glu_dist = c.admission_glucose_diabetic if diab else c.admission_glucose
            for hr, p_hr in enumerate(c.admission_heart_rate):
                for bp, p_bp in enumerate(c.admission_blood_pressure):
                    for o2, p_o2 in enumerate(c.admission_oxygen):
                        for glu, p_glu in enumerate(glu_dist):
                            idx = encode_state(
                                SepsisState(hr, bp, o2, glu, bool(diab))
                            )
                            dist[idx] = p_diab * p_hr * p_bp * p_o2 * p_glu
        return dist

    @cached_property
    def _exact(self) -> "ExactSepsisModel":
        return self._build_exact_model()

    def exact_model(self) -> "ExactSepsisModel":
        return self._exact

    def _build_exact_model(self) -> "ExactSepsisModel":
        states = [decode_state(i) for i in range(N_STATES)]
        terminal = np.array([is_terminal(s) for s in states])
        r_entry = np.zeros(N_STATES)
        for i, s in enumerate(states):
            if is_dead(s):
                r_entry[i] = -1.0
            elif is_discharged(s):
                r_entry[i] = 1.0

        # next_index[diabetic, action, k]: full state index of vital combo k.
        next_index = np.zeros((2, N_ACTIONS, N_VITAL_COMBOS), dtype=np.int64)
        for diab in range(2):
            for a_idx in range(N_ACTIONS):
                a = decode_action(a_idx)
                k = 0
                for glu in range(GLU_LEVELS):
                    for o2 in range(2):
                        for bp in range(3):
                            for hr in range(3):
                                next_index[diab, a_idx, k] = encode_state(
                                    SepsisState(
                                        hr,
                                        bp,
                                        o2,
                                        glu,
                                        bool(diab),
                                        abx_on=a.antibiotics,
                                        vaso_on=a.vasopressors,
                                        vent_on=a.ventilation,
                                    )
                                )
                                k += 1

        p_core = np.zeros((2, N_STATES, N_ACTIONS, N_VITAL_COMBOS))
        for b in range(2):
            for s_idx, s in enumerate(states):
                for a_idx in range(N_ACTIONS):
                    a = decode_action(a_idx)
                    hr_d, bp_d, o2_d, glu_d = self._vital_dists(s, a, bool(b))
                    # core index k = hr + 3*bp + 9*o2 + 18*glu
                    p_core[b, s_idx, a_idx] = (
                        glu_d[:, None, None, None]
                        * o2_d[None, :, None, None]
                        * bp_d[None, None, :, None]
                        * hr_d[None, None, None, :]
                    ).reshape(-1)

        diabetic_of_state = np.array([int(s.diabetic) for s in states])
        return ExactSepsisModel(
            p_core=p_core,
            next_index=next_index,
            diabetic_of_state=diabetic_of_state,
            r_entry=r_entry,
            terminal=terminal,
            p_comorbid=self.config.comorbidity_prevalence,
            admission=self.admission_distribution(),
            gamma=self.config.gamma,
            horizon=self.config.horizon,
        )


class ExactSepsisModel:
    """Exact transition structure of the simulator, per comorbidity branch.

    Transitions are stored compactly: for a given action the next state's
    treatment flags are fixed and only the 90 vital combinations vary, so
    ``p_core[branch, s, a, k]`` spans those combinations and
    ``next_index[diabetic(s), a, k]`` maps them back to full state indices.
    Terminal states are absorbing.
    """

    def __init__(
        self,
        p_core: np.ndarray,
        next_index: np.ndarray,
        diabetic_of_state: np.ndarray,
        r_entry: np.ndarray,
        terminal: np.ndarray,
        p_comorbid: float,
        admission: np.ndarray,
        gamma: float,
        horizon: int,
    ):
        self.p_core = p_core
        self.next_index = next_index
        self.diabetic_of_state = diabetic_of_state
        self.r_entry = r_entry
        self.terminal = terminal
        self.p_comorbid = p_comorbid
        self.admission = admission
        self.gamma = gamma
        self.horizon = horizon
        self.n_states = N_STATES
        self.n_actions = N_ACTIONS

    def branch_view(self, branch: int | None) -> "SepsisBranchModel":
        """Planning view of one comorbidity branch, or the prevalence-weighted
        marginal when ``branch`` is None."""
        return SepsisBranchModel(self, branch)

    def branch_weights(self) -> list[tuple[float, int]]:
        return [(1 - self.p_comorbid, 0), (self.p_comorbid, 1)]

    def dense_row(self, branch: int, s: int, a: int, absorbing: bool = True) -> np.ndarray:
        """Full 1440-entry transition row.

        With ``absorbing=True`` (the episode-process convention) terminal rows
        self-loop; ``absorbing=False`` exposes the raw per-step dynamics, which
        also govern episode starts that happen to satisfy a terminal predicate.
        """
        row = np.zeros(self.n_states)
        if absorbing and self.terminal[s]:
            row[s] = 1.0
            return row
        ni = self.next_index[self.diabetic_of_state[s], a]
        np.add.at(row, ni, self.p_core[branch, s, a])
        return row


class SepsisBranchModel:
    """Adapter exposing one branch (or the marginal) through the tabular-model
    protocol used by the planning routines."""

    def __init__(self, model: ExactSepsisModel, branch: int | None):
        self._m = model
        self._branch = branch
        self.n_states = model.n_states
        self.n_actions = model.n_actions
        self.r_entry = model.r_entry
        self.terminal = model.terminal

    def _weights(self) -> list[tuple[float, int]]:
        if self._branch is None:
            return self._m.branch_weights()
        return [(1.0, self._branch)]

    def q_backup(self, v: np.ndarray, gamma: float) -> np.ndarray:
        """Q(s, a) = E[r(s') + gamma * v(s') * 1{s' non-terminal}]."""
        m = self._m
        cont = np.where(m.terminal, 0.0, v)
        w_full = m.r_entry + gamma * cont
        q = np.zeros((m.n_states, m.n_actions))
        diab = m.diabetic_of_state
        for weight, b in self._weights():
            if weight == 0.0:
                continue
            for a in range(m.n_actions):
                w = w_full[m.next_index[diab, a, :]]  # (S, K)
                q[:, a] += weight * np.einsum("sk,sk->s", m.p_core[b, :, a, :], w)
        return q

    def policy_matrix(self, probs: np.ndarray) -> np.ndarray:
        """Dense state-to-state per-step dynamics under a policy."""
        m = self._m
        mat = np.zeros((m.n_states, m.n_states))
        diab = m.diabetic_of_state
        rows = np.arange(m.n_states)
        for weight, b in self._weights():
            if weight == 0.0:
                continue
            for a in range(m.n_actions):
                ni = m.next_index[diab, a, :]  # (S, K), distinct columns per row
                contrib = weight * probs[:, a][:, None] * m.p_core[b, :, a, :]
                np.add.at(mat, (rows[:, None], ni), contrib)
        return mat
