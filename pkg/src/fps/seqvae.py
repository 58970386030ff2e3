"""Sequential latent-variable trajectory model for per-subgroup augmentation.

A recurrent variational autoencoder over (state, action, reward) sequences:
the encoder embeds each transition into a diagonal-Gaussian latent, the
decoder carries a latent dynamics cell conditioned on actions, a categorical
head reconstructs discrete states and a Gaussian head reconstructs rewards.
Training maximizes the evidence lower bound (reconstruction log-likelihoods
minus the KL terms against the latent prior and latent dynamics) with
single-sample reparameterized gradients.

Recurrent cells are single-layer tanh units; differentiation is exact
analytic backpropagation through the unrolled graph in numpy, validated
against central finite differences by :func:`grad_check`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mdp import Trajectory

_PARAM_SHAPES = (
    # initial encoder
    ("e0", "ns h"),
    ("b0", "h"),
    ("m0_w", "h m"),
    ("m0_b", "m"),
    ("v0_w", "h m"),
    ("v0_b", "m"),
    # recurrent encoder cell + heads
    ("enc_s", "ns h"),
    ("enc_a", "na h"),
    ("enc_z", "m h"),
    ("enc_h", "h h"),
    ("enc_b", "h"),
    ("me_w", "h m"),
    ("me_b", "m"),
    ("ve_w", "h m"),
    ("ve_b", "m"),
    # decoder latent-dynamics cell + heads
    ("dec_a", "na h"),
    ("dec_z", "m h"),
    ("dec_h", "h h"),
    ("dec_b", "h"),
    ("mp_w", "h m"),
    ("mp_b", "m"),
    ("vp_w", "h m"),
    ("vp_b", "m"),
    # state decoder (categorical) and reward decoder (Gaussian)
    ("st_w", "m ns"),
    ("st_b", "ns"),
    ("rw_mw", "m one"),
    ("rw_mb", "one"),
    ("rw_vw", "m one"),
    ("rw_vb", "one"),
)


@dataclass
class TrainConfig:
    """First-order training schedule.

    ``max_iters``/``minibatch`` default to the sample-size rule: more than 200
    trajectories trains for 1000 iterations with minibatches of 64, otherwise
    200 iterations with minibatches of 4.
    """

    learning_rate: float = 3e-3
    decay: float = 0.997
    max_iters: int | None = None
    minibatch: int | None = None
    seed: int = 0
    grad_clip: float = 5.0
    # Record the full-dataset objective under frozen evaluation noise instead
    # of the noisy minibatch value (costs one extra forward pass per
    # iteration; meant for small fixtures and diagnostics).
    eval_trace: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("decay must lie in (0, 1]")

    def schedule(self, n_trajectories: int) -> tuple[int, int]:
        if self.max_iters is not None and self.minibatch is not None:
            return self.max_iters, self.minibatch
        iters, batch = (1000, 64) if n_trajectories > 200 else (200, 4)
        return (self.max_iters or iters), (self.minibatch or batch)


class SeqVAEModel:
    """Parameter container with shape metadata and (de)serialization."""

    def __init__(self, n_states: int, n_actions: int, hidden: int, latent: int, params: dict):
        self.n_states = n_states
        self.n_actions = n_actions
        self.hidden = hidden
        self.latent = latent
        self.params = params

    @classmethod
    def init(
        cls,
        n_states: int,
        n_actions: int,
        hidden: int = 64,
        latent: int = 8,
        seed: int = 0,
        scale: float = 0.1,
    ) -> "SeqVAEModel":
        rng = np.random.default_rng(seed)
        dims = {"ns": n_states, "na": n_actions, "h": hidden, "m": latent, "one": 1}
        params = {}
        for name, spec in _PARAM_SHAPES:
            shape = tuple(dims[tok] for tok in spec.split())
            if len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, scale, size=shape)
        # Start log-variance heads near a moderate fixed variance.
        for name in ("v0_b", "ve_b", "vp_b", "rw_vb"):
            params[name] = params[name] - 1.0
        return cls(n_states, n_actions, hidden, latent, params)

    def copy(self) -> "SeqVAEModel":
        return SeqVAEModel(
            self.n_states,
            self.n_actions,
            self.hidden,
            self.latent,
            {k: v.copy() for k, v in self.params.items()},
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.params[name].ravel() for name, _ in _PARAM_SHAPES])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for name, _ in _PARAM_SHAPES:
            size = self.params[name].size
            self.params[name] = vec[pos : pos + size].reshape(self.params[name].shape).copy()
            pos += size

    def save(self, path) -> None:
        blob = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "hidden": self.hidden,
            "latent": self.latent,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }
        with open(path, "w") as fh:
            json.dump(blob, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SeqVAEModel":
        with open(path) as fh:
            blob = json.load(fh)
        params = {k: np.asarray(v, dtype=np.float64) for k, v in blob["params"].items()}
        return cls(blob["n_states"], blob["n_actions"], blob["hidden"], blob["latent"], params)


def _batch_arrays(batch: list[Trajectory]):
    """State/action/reward arrays padded to the longest trajectory.

    The state sequence of a trajectory includes its terminal state, so a
    length-L trajectory contributes L+1 states, L actions and L rewards.
    """
    if not batch:
        raise ValueError("empty batch")
    lengths = np.array([len(t) for t in batch])
    l_max = int(lengths.max())
    b = len(batch)
    xs = np.zeros((b, l_max + 1), dtype=np.int64)
    acts = np.zeros((b, l_max), dtype=np.int64)
    rws = np.zeros((b, l_max))
    for i, traj in enumerate(batch):
        l = len(traj)
        xs[i, :l] = traj.states
        xs[i, l] = traj.terminal_state
        acts[i, :l] = traj.actions
        rws[i, :l] = traj.rewards
    step_mask = np.arange(l_max)[None, :] < lengths[:, None]
    state_mask = np.arange(l_max + 1)[None, :] <= lengths[:, None]
    return xs, acts, rws, step_mask.astype(float), state_mask.astype(float), lengths


def sample_noise(batch_size: int, l_max: int, latent: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((batch_size, l_max + 1, latent))


def _log_softmax_pick(logits: np.ndarray, idx: np.ndarray):
    zmax = logits.max(axis=1, keepdims=True)
    expz = np.exp(logits - zmax)
    denom = expz.sum(axis=1, keepdims=True)
    probs = expz / denom
    ll = logits[np.arange(len(idx)), idx] - (np.log(denom[:, 0]) + zmax[:, 0])
    return ll, probs


def _forward(model: SeqVAEModel, batch: list[Trajectory], noise: np.ndarray):
    """Unrolled forward pass; returns the ELBO terms and a tape for backprop."""
    p = model.params
    xs, acts, rws, smask, xmask, lengths = _batch_arrays(batch)
    b, l_max = acts.shape
    eps = noise

    h0 = np.tanh(p["e0"][xs[:, 0]] + p["b0"])
    mu0 = h0 @ p["m0_w"] + p["m0_b"]
    lv0 = h0 @ p["v0_w"] + p["v0_b"]
    z0 = mu0 + np.exp(0.5 * lv0) * eps[:, 0]
    kl0 = 0.5 * (np.exp(lv0) + mu0**2 - 1.0 - lv0).sum(axis=1)

    he = [h0]
    hd = [np.zeros((b, model.hidden))]
    zs = [z0]
    mus, lvs, mups, lvps = [], [], [], []
    ll_state = np.zeros(b)
    ll_reward = np.zeros(b)
    kl_steps = np.zeros(b)
    state_probs = []
    ll0, probs0 = _log_softmax_pick(zs[0] @ p["st_w"] + p["st_b"], xs[:, 0])
    ll_state += ll0  # state 0 always exists
    state_probs.append(probs0)
    rw_mu, rw_lv = [], []

    for t in range(1, l_max + 1):
        a_prev = acts[:, t - 1]
        pre_e = (
            p["enc_s"][xs[:, t]]
            + p["enc_a"][a_prev]
            + zs[t - 1] @ p["enc_z"]
            + he[t - 1] @ p["enc_h"]
            + p["enc_b"]
        )
        he_t = np.tanh(pre_e)
        mu_t = he_t @ p["me_w"] + p["me_b"]
        lv_t = he_t @ p["ve_w"] + p["ve_b"]
        z_t = mu_t + np.exp(0.5 * lv_t) * eps[:, t]

        pre_d = (
            p["dec_a"][a_prev] + zs[t - 1] @ p["dec_z"] + hd[t - 1] @ p["dec_h"] + p["dec_b"]
        )
        hd_t = np.tanh(pre_d)
        mup_t = hd_t @ p["mp_w"] + p["mp_b"]
        lvp_t = hd_t @ p["vp_w"] + p["vp_b"]

        kl_t = 0.5 * (
            lvp_t - lv_t + (np.exp(lv_t) + (mu_t - mup_t) ** 2) * np.exp(-lvp_t) - 1.0
        ).sum(axis=1)
        ll_s, probs_t = _log_softmax_pick(z_t @ p["st_w"] + p["st_b"], xs[:, t])
        mur = (z_t @ p["rw_mw"] + p["rw_mb"])[:, 0]
        lvr = (z_t @ p["rw_vw"] + p["rw_vb"])[:, 0]
        r = rws[:, t - 1]
        ll_r = -0.5 * (np.log(2 * np.pi) + lvr + (r - mur) ** 2 * np.exp(-lvr))

        m_t = smask[:, t - 1]
        ll_state += m_t * ll_s
        ll_reward += m_t * ll_r
        kl_steps += m_t * kl_t

        he.append(he_t)
        hd.append(hd_t)
        zs.append(z_t)
        mus.append(mu_t)
        lvs.append(lv_t)
        mups.append(mup_t)
        lvps.append(lvp_t)
        state_probs.append(probs_t)
        rw_mu.append(mur)
        rw_lv.append(lvr)

    terms = {
        "state_loglik": float(ll_state.mean()),
        "reward_loglik": float(ll_reward.mean()),
        "kl_initial": float(kl0.mean()),
        "kl_transitions": float(kl_steps.mean()),
    }
    value = (
        terms["state_loglik"]
        + terms["reward_loglik"]
        - terms["kl_initial"]
        - terms["kl_transitions"]
    )
    tape = {
        "xs": xs,
        "acts": acts,
        "rws": rws,
        "smask": smask,
        "eps": eps,
        "h0": h0,
        "mu0": mu0,
        "lv0": lv0,
        "he": he,
        "hd": hd,
        "zs": zs,
        "mus": mus,
        "lvs": lvs,
        "mups": mups,
        "lvps": lvps,
        "state_probs": state_probs,
        "rw_mu": rw_mu,
        "rw_lv": rw_lv,
        "l_max": l_max,
        "b": b,
    }
    return value, terms, tape


def elbo(
    model: SeqVAEModel,
    batch: list[Trajectory],
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> float:
    """Single-sample reparameterized ELBO, averaged over the batch.

    Latent noise comes from ``noise`` when given (frozen evaluation), else is
    drawn from ``rng``.  Raises on a non-finite value, naming the bad term.
    """
    if noise is None:
        if rng is None:
            rng = np.random.default_rng(0)
        lengths = max(len(t) for t in batch)
        noise = sample_noise(len(batch), lengths, model.latent, rng)
    value, terms, _ = _forward(model, batch, noise)
    if not np.isfinite(value):
        bad = [k for k, v in terms.items() if not np.isfinite(v)]
        raise ValueError(f"non-finite evidence bound; offending term(s): {bad}")
    return value


def elbo_and_grad(model: SeqVAEModel, batch: list[Trajectory], noise: np.ndarray):
    """ELBO value and its exact gradient with respect to every parameter."""
    p = model.params
    value, terms, tape = _forward(model, batch, noise)
    b, l_max = tape["b"], tape["l_max"]
    xs, acts, rws, smask, eps = tape["xs"], tape["acts"], tape["rws"], tape["smask"], tape["eps"]
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    coef = 1.0 / b

    dz = [np.zeros((b, model.latent)) for _ in range(l_max + 1)]
    dhe_carry = np.zeros((b, model.hidden))
    dhd_carry = np.zeros((b, model.hidden))

    # State-decoder gradient at t = 0 (always active).
    probs0 = tape["state_probs"][0]
    dlogits0 = -probs0 * coef
    dlogits0[np.arange(b), xs[:, 0]] += coef
    grads["st_w"] += tape["zs"][0].T @ dlogits0
    grads["st_b"] += dlogits0.sum(axis=0)
    dz[0] += dlogits0 @ p["st_w"].T

    for t in range(l_max, 0, -1):
        m_t = smask[:, t - 1]
        c = coef * m_t
        z_t = tape["zs"][t]
        he_t = tape["he"][t]
        hd_t = tape["hd"][t]
        mu_t, lv_t = tape["mus"][t - 1], tape["lvs"][t - 1]
        mup_t, lvp_t = tape["mups"][t - 1], tape["lvps"][t - 1]

        # state decoder
        probs_t = tape["state_probs"][t]
        dlogits = -probs_t * c[:, None]
        dlogits[np.arange(b), xs[:, t]] += c
        grads["st_w"] += z_t.T @ dlogits
        grads["st_b"] += dlogits.sum(axis=0)
        dz[t] += dlogits @ p["st_w"].T

        # reward decoder
        mur, lvr = tape["rw_mu"][t - 1], tape["rw_lv"][t - 1]
        r = rws[:, t - 1]
        inv_var = np.exp(-lvr)
        dmur = c * (r - mur) * inv_var
        dlvr = c * (-0.5) * (1.0 - (r - mur) ** 2 * inv_var)
        grads["rw_mw"] += z_t.T @ dmur[:, None]
        grads["rw_mb"] += np.array([dmur.sum()])
        grads["rw_vw"] += z_t.T @ dlvr[:, None]
        grads["rw_vb"] += np.array([dlvr.sum()])
        dz[t] += dmur[:, None] * p["rw_mw"][:, 0][None, :] + dlvr[:, None] * p["rw_vw"][:, 0][None, :]

        # KL between encoder posterior and latent dynamics (enters with -1)
        e_lv = np.exp(lv_t)
        e_nlvp = np.exp(-lvp_t)
        diff = mu_t - mup_t
        dmu = -c[:, None] * (diff * e_nlvp)
        dmup = c[:, None] * (diff * e_nlvp)
        dlv = -c[:, None] * 0.5 * (e_lv * e_nlvp - 1.0)
        dlvp = -c[:, None] * 0.5 * (1.0 - (e_lv + diff**2) * e_nlvp)

        # reparameterization
        dmu += dz[t]
        dlv += dz[t] * eps[:, t] * 0.5 * np.exp(0.5 * lv_t)

        # encoder heads
        dhe_t = dmu @ p["me_w"].T + dlv @ p["ve_w"].T + dhe_carry
        grads["me_w"] += he_t.T @ dmu
        grads["me_b"] += dmu.sum(axis=0)
        grads["ve_w"] += he_t.T @ dlv
        grads["ve_b"] += dlv.sum(axis=0)

        # decoder heads
        dhd_t = dmup @ p["mp_w"].T + dlvp @ p["vp_w"].T + dhd_carry
        grads["mp_w"] += hd_t.T @ dmup
        grads["mp_b"] += dmup.sum(axis=0)
        grads["vp_w"] += hd_t.T @ dlvp
        grads["vp_b"] += dlvp.sum(axis=0)

        # encoder cell
        dpre_e = dhe_t * (1.0 - he_t**2)
        np.add.at(grads["enc_s"], xs[:, t], dpre_e)
        np.add.at(grads["enc_a"], acts[:, t - 1], dpre_e)
        grads["enc_z"] += tape["zs"][t - 1].T @ dpre_e
        grads["enc_h"] += tape["he"][t - 1].T @ dpre_e
        grads["enc_b"] += dpre_e.sum(axis=0)
        dz[t - 1] += dpre_e @ p["enc_z"].T
        dhe_carry = dpre_e @ p["enc_h"].T

        # decoder cell
        dpre_d = dhd_t * (1.0 - hd_t**2)
        np.add.at(grads["dec_a"], acts[:, t - 1], dpre_d)
        grads["dec_z"] += tape["zs"][t - 1].T @ dpre_d
        grads["dec_h"] += tape["hd"][t - 1].T @ dpre_d
        grads["dec_b"] += dpre_d.sum(axis=0)
        dz[t - 1] += dpre_d @ p["dec_z"].T
        dhd_carry = dpre_d @ p["dec_h"].T

    # t = 0: prior KL (enters with -1) plus reparameterization into z0.
    mu0, lv0, h0 = tape["mu0"], tape["lv0"], tape["h0"]
    dmu0 = -coef * mu0 + dz[0]
    dlv0 = -coef * 0.5 * (np.exp(lv0) - 1.0) + dz[0] * eps[:, 0] * 0.5 * np.exp(0.5 * lv0)
    dh0 = dmu0 @ p["m0_w"].T + dlv0 @ p["v0_w"].T + dhe_carry
    grads["m0_w"] += h0.T @ dmu0
    grads["m0_b"] += dmu0.sum(axis=0)
    grads["v0_w"] += h0.T @ dlv0
    grads["v0_b"] += dlv0.sum(axis=0)
    dpre0 = dh0 * (1.0 - h0**2)
    np.add.at(grads["e0"], xs[:, 0], dpre0)
    grads["b0"] += dpre0.sum(axis=0)

    return value, grads, terms


def grad_check(
    model: SeqVAEModel, batch: list[Trajectory], h: float = 1e-5, seed: int = 0
) -> float:
    """Max relative error between analytic and central-finite-difference
    gradients, with frozen reparameterization noise."""
    l_max = max(len(t) for t in batch)
    noise = sample_noise(len(batch), l_max, model.latent, np.random.default_rng(seed))
    _, grads, _ = elbo_and_grad(model, batch, noise)
    ga = np.concatenate([grads[name].ravel() for name, _ in _PARAM_SHAPES])

    work = model.copy()
    theta = work.flatten()
    gfd = np.empty_like(theta)
    for i in range(len(theta)):
        theta[i] += h
        work.set_flat(theta)
        up, _, _ = _forward(work, batch, noise)
        theta[i] -= 2 * h
        work.set_flat(theta)
        down, _, _ = _forward(work, batch, noise)
        theta[i] += h
        gfd[i] = (up - down) / (2 * h)
    work.set_flat(theta)

    denom = np.maximum(np.maximum(np.abs(ga), np.abs(gfd)), 1e-8)
    rel = np.abs(ga - gfd) / denom
    rel[(np.abs(ga) < 1e-8) & (np.abs(gfd) < 1e-8)] = 0.0
    return float(np.max(rel))


def train(
    trajectories: list[Trajectory],
    config: TrainConfig | None = None,
    n_states: int | None = None,
    n_actions: int | None = None,
    hidden: int = 64,
    latent: int = 8,
) -> tuple[SeqVAEModel, list[float]]:
    """Fit the trajectory model by stochastic gradient ascent on the ELBO.

    Uses adaptive moment estimation with exponential learning-rate decay and
    global-norm gradient clipping; returns the model and the per-iteration
    objective trace.  Raises if the objective turns non-finite, reporting the
    last finite iteration.
    """
    if not trajectories:
        raise ValueError("cannot train on an empty trajectory set")
    config = config or TrainConfig()
    if n_states is None:
        n_states = max(int(max(t.states.max(), t.terminal_state)) for t in trajectories) + 1
    if n_actions is None:
        n_actions = max(int(t.actions.max()) for t in trajectories) + 1
    iters, batch_size = config.schedule(len(trajectories))
    model = SeqVAEModel.init(n_states, n_actions, hidden=hidden, latent=latent, seed=config.seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))

    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    lr = config.learning_rate
    trace: list[float] = []
    eval_noise = None
    if config.eval_trace:
        l_all = max(len(t) for t in trajectories)
        eval_noise = sample_noise(
            len(trajectories),
            l_all,
            model.latent,
            np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(2,))),
        )

    for it in range(1, iters + 1):
        idx = rng.integers(0, len(trajectories), size=min(batch_size, len(trajectories)))
        batch = [trajectories[i] for i in idx]
        l_max = max(len(t) for t in batch)
        noise = sample_noise(len(batch), l_max, model.latent, rng)
        value, grads, _ = elbo_and_grad(model, batch, noise)
        if not np.isfinite(value):
            last = trace[-1] if trace else float("nan")
            raise ValueError(
                f"training diverged at iteration {it}; last finite objective {last:.4f}"
            )
        if config.eval_trace:
            full, _, _ = _forward(model, trajectories, eval_noise)
            trace.append(full)
        else:
            trace.append(value)

        norm = float(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))
        scale = 1.0 if norm <= config.grad_clip else config.grad_clip / norm
        for k in model.params:
            g = grads[k] * scale
            m_state[k] = beta1 * m_state[k] + (1 - beta1) * g
            v_state[k] = beta2 * v_state[k] + (1 - beta2) * g * g
            m_hat = m_state[k] / (1 - beta1**it)
            v_hat = v_state[k] / (1 - beta2**it)
            model.params[k] += lr * m_hat / (np.sqrt(v_hat) + adam_eps)
        lr *= config.decay
    return model, trace


def _sample_from(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    acc = 0.0
    for i, pv in enumerate(probs):
        acc += pv
        if u < acc:
            return i
    return len(probs) - 1


def sample_trajectories(
    model: SeqVAEModel,
    beta,
    n: int,
    horizon: int,
    rng: np.random.Generator,
    terminal_predicate=None,
    id_start: int = 1,
    reward_values: tuple = (-1.0, 0.0, 1.0),
) -> list[Trajectory]:
    """Generate synthetic trajectories under the behavior policy.

    States decode from the categorical head, actions are drawn from ``beta`` at
    the decoded states, and generation stops early when the decoded state
    satisfies ``terminal_predicate``.  At assembly the final decoded reward is
    rounded to the nearest allowed value and earlier rewards are zeroed, so
    synthetic trajectories obey the terminal-only reward convention; they are
    marked ``synthetic`` and numbered from ``id_start``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    p = model.params
    out = []
    allowed = np.asarray(reward_values)
    for i in range(n):
        z = rng.standard_normal(model.latent)
        logits = z @ p["st_w"] + p["st_b"]
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        s = _sample_from(probs, rng)
        a = _sample_from(beta.probs[s], rng)
        hd = np.zeros(model.hidden)
        states, actions, rewards = [], [], []
        terminated_early = False
        terminal_state = s
        for _ in range(horizon):
            hd = np.tanh(p["dec_a"][a] + z @ p["dec_z"] + hd @ p["dec_h"] + p["dec_b"])
            mup = hd @ p["mp_w"] + p["mp_b"]
            lvp = hd @ p["vp_w"] + p["vp_b"]
            z_next = mup + np.exp(0.5 * lvp) * rng.standard_normal(model.latent)
            mur = float(z_next @ p["rw_mw"][:, 0] + p["rw_mb"][0])
            lvr = float(z_next @ p["rw_vw"][:, 0] + p["rw_vb"][0])
            r = mur + np.exp(0.5 * lvr) * rng.standard_normal()
            logits = z_next @ p["st_w"] + p["st_b"]
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            s_next = _sample_from(probs, rng)

            states.append(s)
            actions.append(a)
            rewards.append(r)
            terminal_state = s_next
            z = z_next
            s = s_next
            if terminal_predicate is not None and terminal_predicate(s_next):
                terminated_early = True
                break
            a = _sample_from(beta.probs[s], rng)
        final = float(allowed[np.argmin(np.abs(allowed - rewards[-1]))])
        rewards = [0.0] * (len(rewards) - 1) + [final]
        out.append(
            Trajectory(
                participant_id=id_start + i,
                states=states,
                actions=actions,
                rewards=rewards,
                terminal_state=terminal_state,
                terminated_early=terminated_early,
                synthetic=True,
            )
        )
    return out
