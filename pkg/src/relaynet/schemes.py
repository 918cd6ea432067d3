"""Closed-loop linear communication and control schemes.

Every step function is vectorized over independent trials: state arrays have
a leading trial axis and ``noise`` holds standard normal draws of shape
(trials, channels), scaled here by the relevant standard deviations.  The
analytic variance is carried alongside the sample paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import HalfDuplexDerived, hd_derived
from .bounds import cascade_sufficient, halfduplex_sufficient, parallel_sufficient
from .model import Cascade, ConfigError, HalfDuplex, Parallel, PlantModel, TimeShare


class SchemePairingError(ValueError):
    """Scheme, plant and topology do not fit together."""


@dataclass(frozen=True)
class InnovationRecord:
    predicted: np.ndarray   # R_hat
    innovation: np.ndarray  # I = R - R_hat
    L1: float
    L2: float


@dataclass(frozen=True)
class SchemeState:
    t: int
    x: np.ndarray
    xhat: np.ndarray
    alpha: float             # analytic second moment of x
    phase: str = "init"      # phase of the *next* step
    y: np.ndarray | None = None          # relay receptions from the last phase-1 slot
    u: np.ndarray | None = None
    sent: np.ndarray | None = None       # sensor transmission of the last step
    relay_sent: np.ndarray | None = None
    innovation: InnovationRecord | None = None
    alpha_prev: float = float("nan")     # prior variance at the last phase-1 slot
    xhat_prev: np.ndarray | None = None
    cov: np.ndarray | None = None        # vector schemes: state covariance


def initial_state(x0, alpha0: float, relays: int = 0, cov=None) -> SchemeState:
    x0 = np.asarray(x0, dtype=float)
    y = np.zeros(x0.shape + (relays,)) if relays else None
    return SchemeState(0, x0, np.zeros_like(x0), float(alpha0), "init", y=y,
                       cov=None if cov is None else np.asarray(cov, dtype=float))


def _sgn(v: float) -> float:
    return -1.0 if v < 0 else 1.0


# ------------------------------------------------------ half-duplex SK

def sk_channels(topo: HalfDuplex) -> int:
    """Noise channels per step: plant noise, controller noise, relay noises."""
    return 2 + topo.n_relays


def sk_halfduplex_step(state: SchemeState, topo: HalfDuplex, beta: float, relay_powers,
                       lam: float, n_w: float, noise, derived: HalfDuplexDerived | None = None
                       ) -> SchemeState:
    """Advance the half-duplex scheme by one channel use.

    noise[:, 0] drives the plant, noise[:, 1] the controller receiver and
    noise[:, 2:] the relay receivers.
    """
    d = derived or hd_derived(topo, beta, relay_powers)
    Ps, Nd = topo.source_power, topo.controller_noise
    h, hi, Nr = topo.direct_gain, topo.relay_gains, topo.relay_noise
    P = np.asarray(relay_powers, dtype=float)
    x, alpha = state.x, state.alpha
    if alpha <= 0:
        raise FloatingPointError("sk_halfduplex_step: non-positive variance")
    w = math.sqrt(n_w) * noise[:, 0]
    zd = math.sqrt(Nd) * noise[:, 1]
    t = state.t

    if t == 0:
        s = math.sqrt(Ps / alpha) * x
        r = h * s + zd
        if h != 0 and Ps > 0:
            xhat = r / (h * math.sqrt(Ps / alpha))
            post = Nd * alpha / (h * h * Ps)
        else:
            xhat = np.zeros_like(x)
            post = alpha
        u = -lam * xhat
        return replace(state, t=1, x=lam * x + u + w, xhat=xhat, u=u, sent=s,
                       relay_sent=None, innovation=None,
                       alpha=lam * lam * post + n_w, phase="phase1")

    if t % 2 == 1:
        s = math.sqrt(2 * beta * Ps / alpha) * x
        r = h * s + zd
        y = s[:, None] + np.sqrt(Nr) * noise[:, 2:] if hi.size else state.y
        xhat = (h * math.sqrt(2 * beta * Ps * alpha) / (2 * h * h * beta * Ps + Nd)) * r
        u = -lam * xhat
        return replace(state, t=t + 1, x=lam * x + u + w, xhat=xhat, u=u, sent=s,
                       relay_sent=None, innovation=None, y=y, alpha_prev=alpha,
                       xhat_prev=xhat, alpha=lam * lam * d.k * alpha + n_w, phase="phase2")

    # phase 2: direct link and coherent amplify-forward, then innovation
    a = abs(lam)
    s = _sgn(h) * _sgn(lam) * math.sqrt(2 * (1 - beta) * Ps / alpha) * x
    if hi.size:
        gain = np.sign(hi) * np.sqrt(2 * P / (2 * beta * Ps + Nr))
        gain[hi == 0] = 0.0
        rs = state.y * gain
        r = h * s + rs @ hi + zd
    else:
        rs = None
        r = h * s + zd
    L1 = abs(h) * _sgn(lam) * math.sqrt(2 * (1 - beta) * Ps / alpha)
    ap = state.alpha_prev
    L2 = math.sqrt(d.k1 / ap) if ap > 0 else 0.0
    rhat = L2 * state.xhat_prev
    innov = r - rhat
    v = d.k * ap
    cxi = L1 * alpha + L2 * lam * v
    cii = L1 * L1 * alpha + L2 * L2 * v + 2 * L1 * L2 * lam * v + d.N_tilde
    xhat = (cxi / cii) * innov
    post = alpha - cxi * cxi / cii
    u = -lam * xhat
    return replace(state, t=t + 1, x=lam * x + u + w, xhat=xhat, u=u, sent=s, relay_sent=rs,
                   innovation=InnovationRecord(rhat, innov, L1, L2),
                   alpha=lam * lam * post + n_w, phase="phase1")


# ------------------------------------------------------ linear cascade

def cascade_channels(topo: Cascade) -> int:
    return 2


def linear_cascade_step(state: SchemeState, topo: Cascade, relay_powers, lam: float,
                        n_w: float, noise) -> SchemeState:
    """One slot of the L-slot cascade round.

    Slot j carries hop j+1: the sensor (slot 0) and each relay rescale their
    input to power L*P and forward it.  The controller stays silent until the
    last slot, where it applies U = -lam^L X_hat from the end-to-end MMSE
    estimate of the state sampled at the round start.  noise[:, 0] drives the
    plant, noise[:, 1] the active hop.
    """
    L = topo.hops
    N = topo.noise_vars
    j = state.t % L
    w = math.sqrt(n_w) * noise[:, 0]
    z = math.sqrt(N[j]) * noise[:, 1]
    x = state.x
    if j == 0:
        a0 = state.alpha
        p = L * topo.source_power
        g = math.sqrt(p / a0)
        s = g * x
        c = g * a0                       # Cov(X_round, s)
    else:
        a0 = state.alpha_prev
        c_in, v_in = state.cov
        p = L * float(relay_powers[j - 1])
        g = math.sqrt(p / v_in)
        s = g * state.y
        c = g * c_in
    y = s + z
    v = p + N[j]                         # var of the hop output
    if j < L - 1:
        return replace(state, t=state.t + 1, x=lam * x + w, y=y, sent=s, u=np.zeros_like(x),
                       cov=np.array([c, v]), alpha_prev=a0,
                       alpha=lam * lam * state.alpha + n_w, phase="relay")
    xhat = (c / v) * y
    rho2 = c * c / (a0 * v)
    u = -(lam ** L) * xhat
    alpha = lam ** (2 * L) * a0 * (1 - rho2) + n_w * sum(lam ** (2 * i) for i in range(L))
    return replace(state, t=state.t + 1, x=lam * x + u + w, xhat=xhat, u=u, sent=s, y=None,
                   cov=None, alpha_prev=a0, alpha=alpha, phase="sensor")


def cascade_rho2(topo: Cascade, relay_powers) -> float:
    """End-to-end squared correlation of the amplify-forward chain."""
    L = topo.hops
    powers = np.r_[topo.source_power, np.asarray(relay_powers, dtype=float)]
    return float(np.prod(L * powers / (L * powers + topo.noise_vars)))


# ------------------------------------------------------ linear parallel

def parallel_channels(topo: Parallel) -> int:
    return 1 + topo.n_relays


def parallel_snr(topo: Parallel, relay_powers) -> np.ndarray:
    Ps, Nr, Nd = topo.source_power, topo.relay_noise, topo.controller_noise
    P = np.asarray(relay_powers, dtype=float)
    den = 2 * Ps * Nd + 2 * P * Nr + Nd * Nr
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(P > 0, 4 * Ps * P / den, 0.0)


def linear_parallel_step(state: SchemeState, topo: Parallel, relay_powers, lam: float,
                         n_w: float, noise) -> SchemeState:
    """One slot of the two-slot parallel round.

    Slot 0: the sensor broadcasts sqrt(2Ps/alpha) X, relay i hears it with
    noise Nr_i (noise[:, 1:]).  Slot 1: relay i forwards its reception at
    power 2 Pr_i over its own channel (noise Nd_i); the controller combines
    the L outputs and applies U = -lam^2 X_hat.  noise[:, 0] drives the plant.
    """
    Ps, Nr, Nd = topo.source_power, topo.relay_noise, topo.controller_noise
    P = np.asarray(relay_powers, dtype=float)
    w = math.sqrt(n_w) * noise[:, 0]
    x = state.x
    if state.t % 2 == 0:
        s = math.sqrt(2 * Ps / state.alpha) * x
        y = s[:, None] + np.sqrt(Nr) * noise[:, 1:]
        return replace(state, t=state.t + 1, x=lam * x + w, y=y, sent=s, u=np.zeros_like(x),
                       alpha_prev=state.alpha, alpha=lam * lam * state.alpha + n_w,
                       phase="relay")
    a0 = state.alpha_prev
    g = np.sqrt(2 * P / (2 * Ps + Nr))
    rs = state.y * g
    r = rs + np.sqrt(Nd) * noise[:, 1:]
    # r_i = c_i X0 + noise_i with c_i = g_i sqrt(2Ps/a0), var_i = g_i^2 Nr_i + Nd_i
    c = g * math.sqrt(2 * Ps / a0)
    var = g * g * Nr + Nd
    with np.errstate(divide="ignore", invalid="ignore"):
        wts = np.where(c > 0, c / var, 0.0)
    snr = float(np.sum(np.where(c > 0, c * c * a0 / var, 0.0)))
    xhat = (r @ wts) * a0 / (1 + snr)
    u = -lam * lam * xhat
    alpha = lam ** 4 * a0 / (1 + snr) + (lam * lam + 1) * n_w
    return replace(state, t=state.t + 1, x=lam * x + u + w, xhat=xhat, u=u, relay_sent=rs,
                   sent=np.zeros_like(x), alpha=alpha, phase="sensor")


# ----------------------------------------------------------- time-share

def timeshare_schedule(plant: PlantModel, slots: int = 12) -> np.ndarray:
    """Interleaved component schedule whose frequencies follow the
    fractions log|a_mm| / sum log|a_ii| (largest-remainder rounding)."""
    diag = np.abs(np.diag(plant.A))
    if np.any(diag <= 1):
        raise ConfigError("A: every mode must be unstable for time sharing")
    fr = np.log2(diag) / np.log2(diag).sum()
    counts = np.floor(fr * slots).astype(int)
    rem = fr * slots - counts
    for i in np.argsort(-rem, kind="stable")[: slots - counts.sum()]:
        counts[i] += 1
    # spread each component evenly over the frame
    keys = [(k + 0.5) / c for m, c in enumerate(counts) for k in range(c)]
    comps = [m for m, c in enumerate(counts) for _ in range(c)]
    order = np.argsort(keys, kind="stable")
    return np.array(comps)[order]


def _check_timeshare_plant(plant: PlantModel):
    A = plant.A
    if not np.allclose(A, np.triu(A)):
        raise SchemePairingError("time-share scheme needs an upper-triangular A (real Jordan form)")
    B = plant.B
    if B.shape[0] != B.shape[1] or np.linalg.matrix_rank(B) < B.shape[0]:
        raise SchemePairingError("time-share scheme needs a square invertible B")


def _psd_sqrt(M) -> np.ndarray:
    """S with S S' = M for a positive semidefinite M."""
    w, V = np.linalg.eigh(M)
    return V * np.sqrt(np.clip(w, 0.0, None))


def timeshare_vector_step(state: SchemeState, plant: PlantModel, capacity: float, schedule,
                          noise) -> SchemeState:
    """Send one state component per slot over a channel of the given capacity.

    The scheduled component is scaled to unit SNR budget 2^{2C} - 1 against
    unit noise; the controller runs a Kalman update of the full state and
    applies B U = -A X_hat every slot.  noise[:, :n] drives the plant and
    noise[:, n] the channel.
    """
    A, n = plant.A, plant.n
    sched = np.asarray(schedule)
    m = int(sched[state.t % sched.size])
    cov = state.cov
    snr = 2.0 ** (2 * capacity) - 1
    x = state.x
    s = math.sqrt(snr / cov[m, m]) * x[:, m]
    r = s + noise[:, n]
    k = cov[:, m] * math.sqrt(snr / cov[m, m]) / (snr + 1)
    xhat = r[:, None] * k[None, :]
    post = cov - np.outer(cov[:, m], cov[m, :]) * (snr / cov[m, m]) / (snr + 1)
    u = -np.linalg.solve(plant.B, A @ xhat.T).T
    w = noise[:, :n] @ _psd_sqrt(plant.noise_var).T
    xn = x @ A.T + u @ plant.B.T + w
    new_cov = A @ post @ A.T + plant.noise_var
    return replace(state, t=state.t + 1, x=xn, xhat=xhat, u=u, sent=s, cov=new_cov,
                   alpha=float(np.trace(new_cov)), phase=f"mode{m}")


def timeshare_frame_step(state: SchemeState, plant: PlantModel, capacity: float, noise
                         ) -> SchemeState:
    """Frame variant for an n-dimensional upper-triangular plant: the state
    sampled at the frame start is sent component by component (last first)
    with scalar per-component estimates; B U = -A^n X_hat at the frame end.

    One call advances a full frame of n slots; noise has n*n + n columns
    (plant noise for each slot, then the n channel uses).
    """
    A, n = plant.A, plant.n
    cov = state.cov
    snr = 2.0 ** (2 * capacity) - 1
    kappa = snr / (snr + 1)
    x = state.x
    var = np.diag(cov)
    chan = noise[:, n * n:]
    xhat = np.empty_like(x)
    for m in range(n):
        s = math.sqrt(snr / var[m]) * x[:, m]
        xhat[:, m] = kappa * math.sqrt(var[m] / snr) * (s + chan[:, m])
    An = np.linalg.matrix_power(A, n)
    chol = _psd_sqrt(plant.noise_var)
    xn = x @ An.T
    acc = np.zeros((n, n))
    for j in range(n):
        Aj = np.linalg.matrix_power(A, n - 1 - j)
        xn = xn + (noise[:, j * n:(j + 1) * n] @ chol.T) @ Aj.T
        acc += Aj @ plant.noise_var @ Aj.T
    u = -np.linalg.solve(plant.B, An @ xhat.T).T
    xn = xn + u @ plant.B.T
    ecov = (1 - kappa) ** 2 * cov
    np.fill_diagonal(ecov, var / (1 + snr))
    new_cov = An @ ecov @ An.T + acc
    return replace(state, t=state.t + n, x=xn, xhat=xhat, u=u, cov=new_cov,
                   alpha=float(np.trace(new_cov)), phase="frame")


# ------------------------------------------------------ scheme wrappers

@dataclass(frozen=True)
class Scheme:
    """A scheme bound to its plant and topology, as driven by the harness.

    ``channels`` standard normals are consumed per call of ``step``, which
    advances ``step_len`` time steps; checkpoints fall on multiples of
    ``round_len`` calls.
    """
    name: str
    plant: PlantModel
    topo: object
    params: dict = field(default_factory=dict)
    channels: int = 1
    round_len: int = 1
    step_len: int = 1

    def initial(self, x0) -> SchemeState:
        relays = getattr(self.topo, "n_relays", 0) if self.name == "sk_halfduplex" else 0
        if self.plant.is_scalar:
            return initial_state(x0, self.plant.init_var[0, 0], relays)
        return initial_state(x0, np.trace(self.plant.init_var), cov=self.plant.init_var)

    def step(self, state: SchemeState, noise) -> SchemeState:
        p = self.params
        if self.name == "sk_halfduplex":
            return sk_halfduplex_step(state, self.topo, p["beta"], p["powers"], p["lam"],
                                      p["n_w"], noise, p["derived"])
        if self.name == "linear_cascade":
            return linear_cascade_step(state, self.topo, p["powers"], p["lam"], p["n_w"], noise)
        if self.name == "linear_parallel":
            return linear_parallel_step(state, self.topo, p["powers"], p["lam"], p["n_w"], noise)
        if p["mode"] == "frame":
            return timeshare_frame_step(state, self.plant, self.topo.capacity, noise)
        return timeshare_vector_step(state, self.plant, self.topo.capacity, p["schedule"], noise)


SCHEMES = ("sk_halfduplex", "linear_cascade", "linear_parallel", "timeshare")


def make_scheme(name: str, plant: PlantModel, topo, beta: float | None = None,
                powers=None, mode: str = "slot", slots: int = 12) -> Scheme:
    """Bind a scheme to a plant and topology; powers and beta default to
    the allocation attaining the sufficient rate."""
    if name not in SCHEMES:
        raise SchemePairingError(f"unknown scheme '{name}'")
    if name == "timeshare":
        if not isinstance(topo, TimeShare):
            raise SchemePairingError("timeshare scheme needs a timeshare topology")
        _check_timeshare_plant(plant)
        n = plant.n
        if mode == "frame":
            return Scheme(name, plant, topo, {"mode": "frame"}, n * n + n, 1, n)
        return Scheme(name, plant, topo, {"mode": "slot", "schedule": timeshare_schedule(plant, slots)},
                      n + 1, 1, 1)
    if not plant.is_scalar:
        raise SchemePairingError(f"{name} needs a scalar plant")
    lam, n_w = plant.lam, plant.n_w
    if name == "sk_halfduplex":
        if not isinstance(topo, HalfDuplex):
            raise SchemePairingError("sk_halfduplex needs a half-duplex or two-hop topology")
        if beta is None or powers is None:
            _, alloc = halfduplex_sufficient(topo)
            beta = alloc.beta if beta is None else beta
            powers = alloc.powers if powers is None else powers
        params = {"beta": float(beta), "powers": np.asarray(powers, dtype=float), "lam": lam,
                  "n_w": n_w, "derived": hd_derived(topo, beta, powers)}
        return Scheme(name, plant, topo, params, sk_channels(topo), 2)
    if name == "linear_cascade":
        if not isinstance(topo, Cascade):
            raise SchemePairingError("linear_cascade needs a cascade topology")
        if powers is None:
            powers = cascade_sufficient(topo)[1].powers
        return Scheme(name, plant, topo, {"powers": np.asarray(powers, dtype=float), "lam": lam,
                                          "n_w": n_w}, 2, topo.hops)
    if not isinstance(topo, Parallel):
        raise SchemePairingError("linear_parallel needs a parallel topology")
    if powers is None:
        powers = parallel_sufficient(topo)[1].powers
    return Scheme(name, plant, topo, {"powers": np.asarray(powers, dtype=float), "lam": lam,
                                      "n_w": n_w}, parallel_channels(topo), 2)


def scheme_threshold(scheme: Scheme) -> float:
    """Exact log2|lambda| stability threshold of the scalar linear schemes."""
    topo = scheme.topo
    if scheme.name == "linear_cascade":
        rho2 = cascade_rho2(topo, scheme.params["powers"])
        return math.inf if rho2 >= 1 else -math.log2(1 - rho2) / (2 * topo.hops)
    if scheme.name == "linear_parallel":
        return math.log2(1 + float(parallel_snr(topo, scheme.params["powers"]).sum())) / 4
    if scheme.name == "sk_halfduplex":
        d = scheme.params["derived"]
        return (math.log2(1 / d.k) + math.log2(1 + d.M_tilde / d.N_tilde)) / 4
    return topo.capacity


def trace_rows(scheme: Scheme, steps: int, seed: int = 0, x0: float | None = None):
    """Single-trial trace rows (t, x, xhat, u, alpha, sensor power)."""
    from .mc import SeedPolicy
    gen = SeedPolicy(seed).generator(0)
    st = scheme.initial(np.atleast_1d(x0 if x0 is not None else
                                      gen.standard_normal() * math.sqrt(scheme.plant.init_var[0, 0])))
    rows = []
    for _ in range(steps):
        z = gen.standard_normal((1, scheme.channels))
        st = scheme.step(st, z)
        xs = st.x[0] if st.x.ndim == 1 else float(np.linalg.norm(st.x[0]))
        xh = st.xhat[0] if st.xhat.ndim == 1 else float(np.linalg.norm(st.xhat[0]))
        uu = 0.0 if st.u is None else (st.u[0] if st.u.ndim == 1 else float(np.linalg.norm(st.u[0])))
        sp = 0.0 if st.sent is None else float(st.sent[0] ** 2)
        rows.append((st.t, float(xs), float(xh), float(uu), st.alpha, sp))
    return rows
