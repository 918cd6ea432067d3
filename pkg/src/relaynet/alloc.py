"""Relay power allocation.

Closed forms (water-filling, cascade Lagrangian, beta=1 non-orthogonal) and
the full-duplex quartic root, plus a projected-gradient ascent used for
objectives without a closed form and as a numerical oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq


class OptimizationError(RuntimeError):
    """Raised when an optimizer fails; ``best`` holds the best iterate."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class AllocationResult:
    powers: np.ndarray
    multiplier: float = float("nan")  # water level or Lagrange parameter
    eta_star: float | None = None
    beta: float | None = None
    objective: float = float("nan")   # achieved rate in bits, when known

    @property
    def total(self) -> float:
        return float(np.sum(self.powers))


def _frozen(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).copy()
    p.setflags(write=False)
    return p


# ---------------------------------------------------------- water-filling

def waterfill(noise_vars, budget: float) -> AllocationResult:
    """Maximize sum log(1 + 2 P_i / N_i) subject to sum P_i = budget.

    Solution P_i = max(gamma - N_i/2, 0) with the level found exactly by
    scanning the sorted floors.
    """
    N = np.asarray(noise_vars, dtype=float)
    if N.size == 0:
        raise ValueError("waterfill: empty noise vector")
    if np.any(N <= 0) or budget < 0:
        raise ValueError("waterfill: need noises > 0 and budget >= 0")
    floors = N / 2.0
    order = np.sort(floors)
    if budget == 0:
        return AllocationResult(_frozen(np.zeros_like(N)), float(order[0]))
    csum = np.cumsum(order)
    level = order[0] + budget
    for k in range(1, N.size + 1):
        level = (budget + csum[k - 1]) / k
        if k == N.size or level <= order[k]:
            break
    P = np.maximum(level - floors, 0.0)
    # put the rounding remainder on the largest active channel
    i = int(np.argmax(P))
    P[i] += budget - P.sum()
    return AllocationResult(_frozen(P), float(level))


# ---------------------------------------------------------------- cascade

def cascade_product(powers, noise_vars, hops: int) -> float:
    """prod_i L P_i / (L P_i + N_i) over the relay hops."""
    P = np.asarray(powers, dtype=float)
    N = np.asarray(noise_vars, dtype=float)
    if P.size == 0:
        return 1.0
    return float(np.prod(hops * P / (hops * P + N)))


def cascade_alloc(noise_vars, budget: float, hops: int | None = None) -> AllocationResult:
    """Maximize prod L P_i / (L P_i + N_{i+1}) over the relay budget.

    Stationarity gives P_i = (-n_i + sqrt(n_i^2 - 4 n_i / gamma)) / 2 with
    n_i = N_{i+1}/L and gamma < 0 the multiplier; gamma is found by a
    bracketed root search so the budget binds.  ``hops`` defaults to
    len(noise_vars) + 1.
    """
    N = np.asarray(noise_vars, dtype=float)
    L = N.size + 1 if hops is None else int(hops)
    if N.size == 0:
        return AllocationResult(_frozen([]), float("nan"), objective=1.0)
    if np.any(N <= 0) or budget < 0:
        raise ValueError("cascade_alloc: need noises > 0 and budget >= 0")
    if budget == 0:
        return AllocationResult(_frozen(np.zeros_like(N)), -math.inf, objective=0.0)
    n = N / L

    # mu = -1/gamma > 0 keeps the square root real for every bracket point
    def powers(mu):
        return 0.5 * (-n + np.sqrt(n * n + 4.0 * n * mu))

    def excess(log_mu):
        return powers(math.exp(log_mu)).sum() - budget

    hi = math.log(np.max(budget * (budget + n) / n)) + 1.0
    lo = hi - 2.0
    while excess(lo) > 0:
        lo -= 2.0 * (hi - lo)
        if lo < -1400:
            raise OptimizationError("cascade_alloc: bracket search failed")
    log_mu = brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    P = powers(math.exp(log_mu))
    P *= budget / P.sum()
    return AllocationResult(_frozen(P), -1.0 / math.exp(log_mu),
                            objective=cascade_product(P, N, L))


# ----------------------------------------------- non-orthogonal, beta = 1

def nonorth_beta1_alloc(source_power, controller_noise, relay_gains, relay_noise,
                        budget) -> AllocationResult:
    """Closed-form beta=1 half-duplex allocation as printed:
    P_i proportional to h_i^2 (2Ps + Nr_i) / (2 Ps Nd + Nr_i Nd + PR h_i^2 Nr_i)^2.
    """
    Ps, Nd, PR = float(source_power), float(controller_noise), float(budget)
    h2 = np.asarray(relay_gains, dtype=float) ** 2
    Nr = np.asarray(relay_noise, dtype=float)
    w = h2 * (2 * Ps + Nr) / (2 * Ps * Nd + Nr * Nd + PR * h2 * Nr) ** 2
    if w.sum() <= 0:
        return AllocationResult(_frozen(np.zeros_like(w)), beta=1.0)
    return AllocationResult(_frozen(PR * w / w.sum()), beta=1.0)


def beta1_optimal_alloc(source_power, controller_noise, relay_gains, relay_noise,
                        budget) -> AllocationResult:
    """Exact maximizer of the beta=1 half-duplex objective.

    With s_i = sqrt(P_i) the objective is the Rayleigh quotient
    (b's)^2 / s'(Nd/PR I + D)s on the sphere |s|^2 = PR, maximized by
    s proportional to b / (Nd/PR + d).
    """
    Ps, Nd, PR = float(source_power), float(controller_noise), float(budget)
    h2 = np.asarray(relay_gains, dtype=float) ** 2
    Nr = np.asarray(relay_noise, dtype=float)
    if PR == 0 or not np.any(h2 > 0):
        return AllocationResult(_frozen(np.zeros_like(h2)), beta=1.0)
    b = np.sqrt(2 * h2 / (2 * Ps + Nr))
    d = 2 * h2 * Nr / (2 * Ps + Nr)
    s = b / (Nd / PR + d)
    P = s * s
    return AllocationResult(_frozen(PR * P / P.sum()), beta=1.0)


# ------------------------------------------------------ full-duplex eta*

def fullduplex_eta_coeffs(source_power, direct_gain, relay_gains, relay_powers,
                          relay_noise, controller_noise):
    """Coefficients (c4, c3, c2, c0) of c4 e^4 + c3 e^3 + c2 e^2 = c0."""
    Ps, h, Nd = float(source_power), abs(float(direct_gain)), float(controller_noise)
    hi2 = np.asarray(relay_gains, dtype=float) ** 2
    P = np.asarray(relay_powers, dtype=float)
    Nr = np.asarray(relay_noise, dtype=float)
    fwd = float(np.sum(hi2 * P * Nr / (Ps + Nr)))
    c4 = float(np.sum(np.sqrt(hi2 * Ps * P / (Ps + Nr))))
    c3 = 2 * h * Ps * float(np.sum(np.sqrt(hi2 * P / (Ps + Nr))))
    c2 = h * h * Ps + Nd + fwd
    c0 = Nd + fwd
    return c4, c3, c2, c0


def fullduplex_eta(source_power, direct_gain, relay_gains, relay_powers, relay_noise,
                   controller_noise) -> float:
    """Unique root in [0, 1] of the full-duplex quartic."""
    c4, c3, c2, c0 = fullduplex_eta_coeffs(source_power, direct_gain, relay_gains,
                                           relay_powers, relay_noise, controller_noise)
    if source_power == 0:
        return 1.0
    return _eta_root(c4, c3, c2, c0)


def _eta_root(c4, c3, c2, c0, x0=None) -> float:
    def p(e):
        return ((c4 * e + c3) * e + c2) * e * e - c0

    def dp(e):
        return ((4 * c4 * e + 3 * c3) * e + 2 * c2) * e

    if c3 == 0 and c4 == 0:
        return math.sqrt(c0 / c2)
    lo, hi = 0.0, 1.0
    if p(lo) > 0 or p(hi) < 0:
        raise OptimizationError("fullduplex_eta: no sign change on [0, 1]")
    e = 0.5 if x0 is None else min(max(x0, 0.0), 1.0)
    # safeguarded Newton: keep a bracket, fall back to bisection
    for _ in range(200):
        v = p(e)
        if v > 0:
            hi = e
        else:
            lo = e
        d = dp(e)
        step = v / d if d > 0 else math.inf
        nxt = e - step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - e) <= 4e-16 or hi - lo <= 4e-16:
            e = nxt
            break
        e = nxt
    return e


# ------------------------------------------------- projected-gradient ascent

def project_capped_simplex(x, budget: float) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x <= budget}."""
    y = np.maximum(np.asarray(x, dtype=float), 0.0)
    if y.sum() <= budget:
        return y
    if budget <= 0:
        return np.zeros_like(y)
    u = np.sort(np.asarray(x, dtype=float))[::-1]
    css = np.cumsum(u) - budget
    k = np.arange(1, u.size + 1)
    # index 0 always qualifies in exact arithmetic; rounding can lose it
    hits = np.nonzero(u - css / k > 0)[0]
    rho = hits[-1] if hits.size else 0
    theta = css[rho] / (rho + 1.0)
    return np.maximum(np.asarray(x, dtype=float) - theta, 0.0)


def project_ball_orthant(s, radius: float) -> np.ndarray:
    """Euclidean projection onto {s >= 0, |s| <= radius}."""
    y = np.maximum(np.asarray(s, dtype=float), 0.0)
    nrm = math.sqrt(float(y @ y))
    if nrm > radius:
        y *= radius / nrm
    return y


def numeric_gradient(f, x, h=1e-7):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        step = h * max(1.0, abs(x[i]))
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def projected_ascent(f, x0, project, grad=None, tol=1e-9, max_iter=5000):
    """Maximize f by projected gradient ascent with Armijo backtracking.

    Trial steps use the Barzilai-Borwein length.  Stops when an accepted
    step improves f by less than tol*(1+|f|) and the iterate moves less than
    sqrt(tol).  Returns (x, f(x)).
    """
    grad = grad or (lambda z: numeric_gradient(f, z))
    x = project(np.asarray(x0, dtype=float))
    fx = f(x)
    g = grad(x)
    step = 1.0
    for _ in range(max_iter):
        while True:
            y = project(x + step * g)
            fy = f(y)
            if fy >= fx + 1e-4 * float(g @ (y - x)) or step < 1e-14:
                break
            step *= 0.5
        if step < 1e-14 or fy <= fx:
            return x, fx
        dx = y - x
        moved = math.sqrt(float(dx @ dx))
        gain = fy - fx
        gy = grad(y)
        curv = -float(dx @ (gy - g))
        step = min(float(dx @ dx) / curv, 1e12) if curv > 0 else min(2.0 * step, 1e12)
        x, fx, g = y, fy, gy
        if gain <= tol * (1 + abs(fx)) and moved <= math.sqrt(tol) * (1 + math.sqrt(float(x @ x))):
            return x, fx
    raise OptimizationError("projected_ascent: iteration cap reached", best=(x, fx))
