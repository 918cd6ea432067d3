"""Deterministic recursions behind the half-duplex and time-sharing schemes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .model import HalfDuplex

LN2 = math.log(2.0)


# ------------------------------------------------ half-duplex constants

@dataclass(frozen=True)
class HalfDuplexDerived:
    k: float          # phase-1 error fraction Nd / (2 h^2 beta Ps + Nd)
    k1: float         # squared coherent relay amplitude
    k2: float         # direct amplitude in phase 2
    f_inf: float
    M_tilde: float    # (k2 + sqrt(k1 k))^2
    M_tilde_direct: float  # the same quantity from the rate-form definition
    N_tilde: float
    beta: float

    @property
    def m_consistent(self) -> bool:
        return math.isclose(self.M_tilde, self.M_tilde_direct, rel_tol=1e-12, abs_tol=1e-300)


def hd_derived(topo: HalfDuplex, beta: float, relay_powers) -> HalfDuplexDerived:
    Ps, Nd = topo.source_power, topo.controller_noise
    h2 = topo.direct_gain ** 2
    hi2 = topo.relay_gains ** 2
    Nr = topo.relay_noise
    P = np.asarray(relay_powers, dtype=float)
    k = Nd / (2 * h2 * beta * Ps + Nd)
    k1 = float(np.sum(np.sqrt(4 * hi2 * beta * Ps * P / (2 * beta * Ps + Nr)))) ** 2
    k2 = math.sqrt(2 * h2 * (1 - beta) * Ps)
    Nt = Nd + float(np.sum(2 * hi2 * P * Nr / (2 * beta * Ps + Nr)))
    M = (k2 + math.sqrt(k1 * k)) ** 2
    M_direct = (k2 + math.sqrt(2 * beta * Ps * Nd / (2 * h2 * beta * Ps + Nd))
                * float(np.sum(np.sqrt(2 * hi2 * P / (2 * beta * Ps + Nr))))) ** 2
    return HalfDuplexDerived(k, k1, k2, Nt / (M + Nt), M, M_direct, Nt, float(beta))


def hd_stability_predicate(d: HalfDuplexDerived, lam: float) -> bool:
    """Sufficient condition lambda^4 k f_inf < 1 (strict)."""
    return lam ** 4 * d.k * d.f_inf < 1


def hd_rate(d: HalfDuplexDerived) -> float:
    """Threshold on log2|lambda| implied by the predicate."""
    return (math.log2(1 / d.k) + math.log2(1 + d.M_tilde / d.N_tilde)) / 4


def envelope_f(a, b, c, d, x):
    """f(x) = (a + b/x) / ((c + sqrt(d + b/x))^2 + a + b/x)."""
    y = b / np.asarray(x, dtype=float)
    return (a + y) / ((c + np.sqrt(d + y)) ** 2 + a + y)


def _scaled_excess(a, b, c, d, x):
    """x (f(x) - f_inf), written without cancellation."""
    y = b / x
    sd, sy = math.sqrt(d), math.sqrt(d + y)
    den_inf = (c + sd) ** 2 + a
    den = (c + sy) ** 2 + a + y
    if a == 0:
        return b * (c + sd) ** 2 / (den * den_inf)
    return b * ((c + sd) ** 2 - a * (2 * c + sd + sy) / (sd + sy)) / (den * den_inf)


@dataclass(frozen=True)
class EnvelopeFit:
    f_inf: float
    m: float
    x0: float

    def bound(self, x):
        return self.f_inf + self.m / np.asarray(x, dtype=float)


def envelope_bound(a: float, b: float, c: float, d: float, x0: float,
                   grid: int = 2000, span: float = 1e12) -> EnvelopeFit:
    """Fit f(x) <= f_inf + m/x on [x0, inf).

    m is the supremum of x (f(x) - f_inf) over a log grid up to span*x0,
    refined locally, and compared with its x -> inf limit.
    """
    if min(a, b, c, d) < 0 or x0 <= 0:
        raise ValueError("envelope_bound: need a, b, c, d >= 0 and x0 > 0")
    f_inf = a / ((c + math.sqrt(d)) ** 2 + a) if a > 0 else 0.0
    if b == 0:
        return EnvelopeFit(f_inf, 0.0, x0)
    lx = np.linspace(math.log(x0), math.log(x0 * span), grid)
    vals = np.array([_scaled_excess(a, b, c, d, math.exp(t)) for t in lx])
    j = int(np.argmax(vals))
    best = float(vals[j])
    lo, hi = lx[max(j - 1, 0)], lx[min(j + 1, grid - 1)]
    if hi > lo:
        res = minimize_scalar(lambda t: -_scaled_excess(a, b, c, d, math.exp(t)),
                              bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        best = max(best, float(-res.fun))
    if d > 0 or a == 0:
        # limit of x (f - f_inf) as x -> inf
        sd = math.sqrt(d)
        den_inf = (c + sd) ** 2 + a
        lim = b * ((c + sd) ** 2 - (a * (c + sd) / sd if a > 0 else 0.0)) / den_inf ** 2
        best = max(best, lim)
    return EnvelopeFit(f_inf, max(best, 0.0), x0)


# ------------------------------------------------ half-duplex recursion

def hd_init_variance(topo: HalfDuplex, lam: float, n_w: float, alpha0: float) -> float:
    """Variance after the initialization step; zero-forcing estimate from
    the direct link, or no estimate when h = 0."""
    h2 = topo.direct_gain ** 2
    if h2 > 0 and topo.source_power > 0:
        return lam * lam * topo.controller_noise * alpha0 / (h2 * topo.source_power) + n_w
    return lam * lam * alpha0 + n_w


def hd_phase2_lmmse(d: HalfDuplexDerived, lam: float, n_w: float, alpha: float,
                    alpha_prev: float) -> float:
    """Phase-2 update from the exact innovation statistics, including the
    correlation between the current state and the last plant noise."""
    a = abs(lam)
    v = d.k * alpha_prev
    L1 = d.k2 / math.sqrt(alpha)
    L2 = math.sqrt(d.k1 / alpha_prev) if alpha_prev > 0 else 0.0
    cxi = L1 * alpha + L2 * a * v
    cii = L1 * L1 * alpha + L2 * L2 * v + 2 * L1 * L2 * a * v + d.N_tilde
    return lam * lam * (alpha - cxi * cxi / cii) + n_w


def hd_phase2_paper(d: HalfDuplexDerived, lam: float, n_w: float, alpha_prev: float) -> float:
    """Phase-2 update in the envelope form lam^2 (lam^2 k x + n_w) f(x) + n_w,
    with a = N~, b = n_w k1 / lam^2, c = k2, d = k1 k and x = alpha_prev."""
    if lam == 0:
        return n_w
    b = n_w * d.k1 / lam ** 2
    f = float(envelope_f(d.N_tilde, b, d.k2, d.k1 * d.k, alpha_prev))
    return lam * lam * (lam * lam * d.k * alpha_prev + n_w) * f + n_w


def hd_variance_recursion(topo: HalfDuplex, beta: float, relay_powers, lam: float, n_w: float,
                          alpha0: float, steps: int, form: str = "lmmse") -> np.ndarray:
    """alpha_0 .. alpha_steps of the half-duplex scheme.

    t = 0 is the initialization step, odd t phase 1 and even t >= 2 phase 2.
    ``form`` selects the phase-2 update: "lmmse" (exact) or "paper"
    (omits the state/noise correlation; the two coincide for n_w = 0).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if form not in ("lmmse", "paper"):
        raise ValueError(f"unknown form '{form}'")
    d = hd_derived(topo, beta, relay_powers)
    out = np.empty(steps + 1)
    out[0] = alpha0
    out[1] = hd_init_variance(topo, lam, n_w, alpha0)
    for t in range(1, steps):
        if t % 2 == 1:
            out[t + 1] = lam * lam * d.k * out[t] + n_w
        elif form == "lmmse":
            out[t + 1] = hd_phase2_lmmse(d, lam, n_w, out[t], out[t - 1]) if lam != 0 else n_w
        else:
            out[t + 1] = hd_phase2_paper(d, lam, n_w, out[t - 1])
        if not math.isfinite(out[t + 1]):
            out[t + 1:] = math.inf
            break
    return out


def hd_upper_sequence(d: HalfDuplexDerived, fit: EnvelopeFit, lam: float, n_w: float,
                      start: float, steps: int) -> np.ndarray:
    """Linear majorant a'_{t+1} = lam^4 k f_inf a'_t + lam^2 m + lam^2 n_w f_inf
    + lam^4 m k + n_w of the odd-indexed variances."""
    r = lam ** 4 * d.k * d.f_inf
    c = lam ** 2 * fit.m + lam ** 2 * n_w * d.f_inf + lam ** 4 * fit.m * d.k + n_w
    out = np.empty(steps + 1)
    out[0] = start
    for t in range(steps):
        out[t + 1] = r * out[t] + c
    return out


def info_rate_halfduplex(topo: HalfDuplex, beta: float, relay_powers) -> float:
    """Information rate of the half-duplex scheme, in bits per channel use.

    Built from the scheme's own statistics: the phase-1 output variance and
    the noiseless-plant innovation variance (|lam| L1 + L2)^2 alpha / lam^2
    + N~, which does not depend on lam.  Since the channel outputs are
    independent this is also the directed information rate.
    """
    Ps, Nd = topo.source_power, topo.controller_noise
    if Ps == 0:
        return 0.0
    d = hd_derived(topo, beta, relay_powers)
    alpha_prev, lam = 1.0, 2.0
    alpha = lam * lam * d.k * alpha_prev
    L1 = d.k2 / math.sqrt(alpha)
    L2 = math.sqrt(d.k1 / alpha_prev)
    var_r1 = 2 * topo.direct_gain ** 2 * beta * Ps + Nd
    var_i = (lam * L1 + L2) ** 2 * alpha / lam ** 2 + d.N_tilde
    return (math.log2(var_r1 / Nd) + math.log2(var_i / d.N_tilde)) / 4


# ---------------------------------------------------------- fixed points

@dataclass(frozen=True)
class FixedPointResult:
    converged: bool
    value: float        # limit, or last iterate on divergence
    iterations: int
    direction: str      # "increasing" | "decreasing" | "constant" | "mixed"
    trajectory: np.ndarray | None = None


def fixed_point_iterate(T: Callable[[float], float], x0: float, max_iter: int = 1_000_000,
                        tol: float = 1e-12, record: bool = False,
                        overflow: float = 1e300) -> FixedPointResult:
    """Iterate x_{t+1} = T(x_t) for a non-decreasing T.

    Converged when |x_{t+1} - x_t| < tol (1 + |x_t|).  Divergence is
    reported when the iterates overflow or the cap is hit.
    """
    x = float(x0)
    traj = [x] if record else None
    up = down = False
    for it in range(1, max_iter + 1):
        nxt = float(T(x))
        if nxt > x:
            up = True
        elif nxt < x:
            down = True
        if record:
            traj.append(nxt)
        if not math.isfinite(nxt) or abs(nxt) > overflow:
            return FixedPointResult(False, nxt, it, _direction(up, down),
                                    np.array(traj) if record else None)
        if abs(nxt - x) < tol * (1 + abs(x)):
            return FixedPointResult(True, nxt, it, _direction(up, down),
                                    np.array(traj) if record else None)
        x = nxt
    return FixedPointResult(False, x, max_iter, _direction(up, down),
                            np.array(traj) if record else None)


def _direction(up, down):
    if up and down:
        return "mixed"
    return "increasing" if up else "decreasing" if down else "constant"


@dataclass(frozen=True)
class SqrtRecursion:
    trajectory: np.ndarray
    converges: bool
    limit: float


def sqrt_recursion(k1: float, k2: float, k3: float, alpha0: float, steps: int) -> SqrtRecursion:
    """alpha_{t+1} = k1 alpha_t + k2 sqrt(alpha_t) + k3 with its verdict.

    For k2, k3 > 0 the map has a fixed point iff k1 < 1; the limit then
    solves a quadratic in sqrt(alpha).
    """
    if min(k1, k2, k3, alpha0) < 0:
        raise ValueError("sqrt_recursion: need non-negative coefficients and alpha0")
    traj = np.empty(steps + 1)
    traj[0] = alpha0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(steps):
            a = traj[t]
            traj[t + 1] = k1 * a + k2 * math.sqrt(a) + k3 if math.isfinite(a) else math.inf
    if k2 == 0 and k3 == 0:
        converges = k1 <= 1 or alpha0 == 0
        limit = alpha0 if k1 == 1 or alpha0 == 0 else (0.0 if k1 < 1 else math.inf)
    elif k1 < 1:
        converges = True
        r = (k2 + math.sqrt(k2 * k2 + 4 * (1 - k1) * k3)) / (2 * (1 - k1))
        limit = r * r
    else:
        converges, limit = False, math.inf
    return SqrtRecursion(traj, converges, limit)


def timeshare_upper_sequence(lam1: float, lam2: float, capacity: float, n_w1: float,
                             n_w2: float, x1_0: float, x2_traj) -> np.ndarray:
    """Cauchy-Schwarz majorant of E[x1^2] at frame boundaries for the 2-D
    coupled plant, driven by the lower mode's second-moment trajectory."""
    c = 2.0 ** (-2 * capacity)
    n1 = (lam1 ** 2 + 1) * n_w1 + n_w2
    x2 = np.asarray(x2_traj, dtype=float)
    out = np.empty(x2.size)
    out[0] = x1_0
    for t in range(x2.size - 1):
        a = out[t]
        out[t + 1] = (lam1 ** 4 * c * a + 2 * lam1 ** 2 * abs(lam1 + lam2) * c * math.sqrt(a * x2[t])
                      + (lam1 + lam2) ** 2 * c * x2[t] + n1)
    return out
