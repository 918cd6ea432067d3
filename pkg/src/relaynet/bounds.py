"""Necessary and sufficient stabilization rates (bits per channel use).

A scalar plant with pole lambda is stabilizable when log2|lambda| is below
the sufficient rate and cannot be stabilized when it exceeds the necessary
rate; vector plants use log2|det A|.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .alloc import (AllocationResult, OptimizationError, cascade_alloc, cascade_product,
                    project_ball_orthant, projected_ascent, waterfill, _eta_root, _frozen)
from .model import (Cascade, FullDuplex, HalfDuplex, Parallel, PlantModel, TimeShare,
                    unstable_log_volume)

LN2 = math.log(2.0)


def log2_1p(x: float) -> float:
    """log2(1 + x), exact near zero and +inf-safe."""
    return math.inf if x == math.inf else math.log1p(x) / LN2


def _div(num: float, den: float) -> float:
    if num == 0:
        return 0.0
    return math.inf if den == 0 else num / den


# ---------------------------------------------------------------- cascade

def cascade_necessary(topo: Cascade) -> float:
    L = topo.hops
    N = topo.noise_vars
    direct = _div(topo.source_power, N[0])
    relayed = _div(topo.relay_budget, float(N[1:].sum())) if L > 1 else math.inf
    return log2_1p(L * min(direct, relayed)) / (2 * L)


def cascade_sufficient(topo: Cascade) -> tuple[float, AllocationResult]:
    L = topo.hops
    N = topo.noise_vars
    Ps = topo.source_power
    first = 1.0 if N[0] == 0 and Ps > 0 else _div(L * Ps, L * Ps + N[0])
    if topo.relay_powers is not None:
        alloc = AllocationResult(topo.relay_powers)
    else:
        alloc = cascade_alloc(N[1:], topo.relay_budget, L)
    rate = log2_1p(first * cascade_product(alloc.powers, N[1:], L)) / (2 * L)
    return rate, replace(alloc, objective=rate)


# --------------------------------------------------------------- parallel

def parallel_necessary(topo: Parallel) -> float:
    Ps, PR = topo.source_power, topo.relay_budget
    Nr, Nd = topo.relay_noise, topo.controller_noise
    if Ps == 0:
        return 0.0
    broadcast = math.inf if np.any(Nr == 0) else 2 * Ps * float(np.sum(1 / Nr))
    if PR == 0:
        relay_cut = 0.0
    elif np.any(Nd == 0):
        relay_cut = math.inf
    else:
        P = waterfill(Nd, PR).powers
        relay_cut = float(np.sum(np.log2(1 + 2 * P / Nd)))
    return min(log2_1p(broadcast), relay_cut) / 4


def _parallel_terms(P, Ps, Nr, Nd):
    A = 2 * Ps * Nd + Nd * Nr
    den = A + 2 * P * Nr
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(P > 0, 4 * Ps * P / den, 0.0)
    return t


def _parallel_alloc(Ps, PR, Nr, Nd) -> np.ndarray:
    """Maximize sum 4 Ps P_i / (A_i + B_i P_i): concave, separable terms."""
    L = Nr.size
    A = 2 * Ps * Nd + Nd * Nr
    B = 2 * Nr
    if PR == 0:
        return np.zeros(L)
    if np.any(A == 0) or np.any(B == 0):
        # degenerate remark cases: fall back to the generic ascent
        def f(P):
            return float(np.sum(_parallel_terms(P, Ps, Nr, Nd)))
        from .alloc import project_capped_simplex
        P, _ = projected_ascent(f, np.full(L, PR / L), lambda x: project_capped_simplex(x, PR))
        return P

    def power(mu):
        return np.maximum((np.sqrt(4 * Ps * A / mu) - A) / B, 0.0)

    def excess(log_mu):
        return power(math.exp(log_mu)).sum() - PR

    hi = math.log(np.max(4 * Ps / A))
    lo = hi - 1.0
    while excess(lo) < 0:
        lo -= 2.0 * (hi - lo)
    log_mu = brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    P = power(math.exp(log_mu))
    return P * (PR / P.sum())


def parallel_sufficient(topo: Parallel) -> tuple[float, AllocationResult]:
    """Rate at the given per-relay powers, or at the maximizing split."""
    Ps, Nr, Nd = topo.source_power, topo.relay_noise, topo.controller_noise
    if topo.relay_powers is not None:
        P = topo.relay_powers
    else:
        P = _parallel_alloc(Ps, topo.relay_budget, Nr, Nd) if Ps > 0 else np.zeros(Nr.size)
    rate = log2_1p(float(np.sum(_parallel_terms(np.asarray(P), Ps, Nr, Nd)))) / 4
    return rate, AllocationResult(_frozen(P), objective=rate)


def parallel_symmetric_rates(Ps, Pr, Nr, Nd, L) -> tuple[float, float]:
    """(broadcast-cut necessary rate, sufficient rate) for identical relays
    with per-relay power Pr."""
    nec = log2_1p(2 * L * Ps / Nr) / 4
    suf = log2_1p(4 * L * Ps * Pr / (2 * Ps * Nd + 2 * Pr * Nr + Nd * Nr)) / 4
    return nec, suf


def parallel_gap_symmetric(Ps, Pr, Nr, Nd, L) -> float:
    """Broadcast-cut rate minus sufficient rate for identical relays."""
    x = 2 * Ps * Nd * (2 * Ps + Nr) / (4 * Ps * Pr * Nr + Nr * (2 * Ps * Nd + 2 * Pr * Nr + Nd * Nr) / L)
    return log2_1p(x) / 4


def parallel_gap_limit(Ps, Pr, Nr, Nd) -> float:
    return log2_1p(Nd * (2 * Ps + Nr) / (2 * Pr * Nr)) / 4


def parallel_noiseless_threshold(topo: Parallel) -> float:
    if topo.relay_budget == 0:
        return 0.0
    Nd = topo.controller_noise
    if np.any(Nd == 0):
        return math.inf
    P = waterfill(Nd, topo.relay_budget).powers
    return float(np.sum(np.log2(1 + 2 * P / Nd))) / 4


# ------------------------------------------------- shared inner maximizers

def max_correlated_cut(w, u, c, radius2):
    """Maximize sum w_i s_i^2 + (c + u's)^2 over s >= 0, |s|^2 <= radius2.

    This is the relay-side cut numerator with s_i = sqrt(P_i).  The maximum
    sits on the sphere; for c > 0 the stationarity condition reduces to a
    secular equation in the multiplier mu > lambda_max(diag(w) + uu').
    Returns (value, s).
    """
    w = np.asarray(w, dtype=float)
    u = np.asarray(u, dtype=float)
    s = np.zeros(w.size)
    live = (w > 0) | (u > 0)
    if radius2 <= 0 or not np.any(live):
        return c * c, s
    W, U = w[live], u[live]
    R = math.sqrt(radius2)
    if not np.any(U > 0):
        j = int(np.argmax(W))
        sl = np.zeros(W.size)
        sl[j] = R
        s[live] = sl
        return float(W[j] * radius2 + c * c), s
    Q = np.diag(W) + np.outer(U, U)
    vals, vecs = np.linalg.eigh(Q)
    lam = float(vals[-1])
    if c == 0:
        v = np.abs(vecs[:, -1])
        s[live] = R * v / np.linalg.norm(v)
        return lam * radius2, s

    # 1 - F(mu) = prod(mu - eig_i) / prod(mu - w_i), exact as mu -> lambda_max
    rest = vals[:-1]
    log_c, log_R = math.log(c), math.log(R)

    def norm_gap(log_t):
        t = math.exp(log_t)
        mu = lam + t
        r = U / (mu - W)
        log_1mF = log_t + float(np.sum(np.log(mu - rest))) - float(np.sum(np.log(mu - W)))
        return 0.5 * math.log(float(r @ r)) + log_c - log_1mF - log_R

    scale = max(lam, 1e-300)
    lo = math.log(scale) - 40
    hi = math.log(scale + c * math.sqrt(float(U @ U)) / R + float(U @ U)) + 1
    while norm_gap(hi) > 0:
        hi += 2
    if norm_gap(lo) <= 0:
        log_t = lo
    else:
        log_t = brentq(norm_gap, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=500)
    mu = lam + math.exp(log_t)
    sl = U / (mu - W)
    sl *= R / math.sqrt(float(sl @ sl))
    s[live] = sl
    return float(W @ (sl * sl) + (c + U @ sl) ** 2), s


def max_snr_ratio(a, b, d, Nd, radius2):
    """Maximize (a + b's)^2 / (Nd + sum d_i s_i^2) over s >= 0, |s|^2 <= radius2.

    The unconstrained maximum is s = (Nd/a) b/d (Cauchy-Schwarz); otherwise
    the maximizer lies on the sphere with s proportional to b/(d + theta),
    theta >= 0 fixed by the radius.  Returns (value, s).
    """
    b = np.asarray(b, dtype=float)
    d = np.asarray(d, dtype=float)
    s = np.zeros(b.size)
    live = b > 0
    if radius2 <= 0 or not np.any(live):
        return a * a / Nd, s
    B, D = b[live], d[live]
    if a > 0 and np.all(D > 0):
        si = (Nd / a) * B / D
        if float(si @ si) <= radius2:
            s[live] = si
            return a * a / Nd + float(np.sum(B * B / D)), s

    def shape(theta):
        v = B / (D + theta)
        S = float(np.sum(B * B * theta / (D + theta) ** 2))
        tau = 2 * Nd / (a + math.sqrt(a * a + 4 * S * Nd))
        return tau * v

    R = math.sqrt(radius2)

    def gap(log_theta):
        v = shape(math.exp(log_theta))
        return 0.5 * math.log(float(v @ v)) - math.log(R)

    ref = max(float(D.max()), Nd / radius2, 1e-300)
    lo, hi = math.log(ref) - 2, math.log(ref) + 2
    while gap(lo) < 0:
        lo -= 4
        if lo < -700:
            break
    while gap(hi) > 0:
        hi += 4
    log_theta = brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps) if gap(lo) > 0 else lo
    sl = shape(math.exp(log_theta))
    sl *= R / np.linalg.norm(sl)
    s[live] = sl
    return (a + float(B @ sl)) ** 2 / (Nd + float(D @ (sl * sl))), s


def maximize_over_beta(fun, grid: int = 8, xatol: float = 1e-6):
    """Maximize a scalar function of beta on (0, 1]: coarse grid, then a
    bounded Brent (golden-section with parabolic steps) refinement."""
    betas = np.arange(1, grid + 1) / grid
    vals = [fun(b) for b in betas]
    j = int(np.argmax(vals))
    best_b, best_v = float(betas[j]), float(vals[j])
    lo = float(betas[j - 1]) if j > 0 else 1e-9
    hi = float(betas[j + 1]) if j + 1 < grid else 1.0
    res = minimize_scalar(lambda b: -fun(b), bounds=(lo, hi), method="bounded",
                          options={"xatol": xatol})
    if -res.fun > best_v:
        best_b, best_v = float(res.x), float(-res.fun)
    return best_b, best_v


# ----------------------------------------------------------- half-duplex

def _hd_params(topo):
    return (topo.source_power, topo.relay_budget, abs(topo.direct_gain),
            np.abs(topo.relay_gains), topo.relay_noise, topo.controller_noise)


def halfduplex_broadcast_objective(topo: HalfDuplex, beta: float) -> float:
    """Sensor-side cut: log2(1+2h^2(1-b)Ps/Nd) + log2(1+2bPs(sum 1/Nr + h^2/Nd))."""
    Ps, _, h, _, Nr, Nd = _hd_params(topo)
    a = 2 * h * h * Ps / Nd
    b = 2 * Ps * (float(np.sum(1 / Nr)) + h * h / Nd)
    return log2_1p(a * (1 - beta)) + log2_1p(b * beta)


def _hd_broadcast_max(topo: HalfDuplex) -> tuple[float, float]:
    Ps, _, h, _, Nr, Nd = _hd_params(topo)
    a = 2 * h * h * Ps / Nd
    b = 2 * Ps * (float(np.sum(1 / Nr)) + h * h / Nd)
    # concave in beta; stationary point (b - a + ab) / (2ab) >= 1/2
    beta = 1.0 if a == 0 else min(1.0, (b - a + a * b) / (2 * a * b))
    return beta, log2_1p(a * (1 - beta)) + log2_1p(b * beta)


def _hd_relay_cut_terms(topo, beta):
    Ps, PR, h, hi, Nr, Nd = _hd_params(topo)
    q = 2 * (1 - beta) * Ps
    a = np.sqrt(q / (q + Nr)) if q > 0 else np.zeros(Nr.size)
    return hi * hi * (1 - a * a), a * hi, h * math.sqrt(q), 2 * PR


def halfduplex_relay_objective(topo: HalfDuplex, beta: float, relay_powers) -> float:
    """Controller-side cut with the correlation terms, at given powers."""
    Ps, _, h, hi, Nr, Nd = _hd_params(topo)
    w, u, c, _ = _hd_relay_cut_terms(topo, beta)
    s = np.sqrt(2 * np.asarray(relay_powers, dtype=float))
    g = float(w @ (s * s)) + (c + float(u @ s)) ** 2
    return log2_1p(2 * h * h * beta * Ps / Nd) + log2_1p(g / Nd)


def _hd_relay_cut_max(topo, beta):
    Ps, _, h, _, _, Nd = _hd_params(topo)
    w, u, c, r2 = _hd_relay_cut_terms(topo, beta)
    g, s = max_correlated_cut(w, u, c, r2)
    return log2_1p(2 * h * h * beta * Ps / Nd) + log2_1p(g / Nd), s * s / 2


def halfduplex_necessary(topo: HalfDuplex) -> float:
    """Minimum of the two cut objectives, each maximized over its own beta
    and (for the relay cut) over the relay powers."""
    if topo.source_power == 0:
        return 0.0
    _, first = _hd_broadcast_max(topo)
    _, second = maximize_over_beta(lambda b: _hd_relay_cut_max(topo, b)[0])
    return min(first, second) / 4


def _hd_snr_terms(topo, beta):
    Ps, PR, h, hi, Nr, Nd = _hd_params(topo)
    a = h * math.sqrt(2 * (1 - beta) * Ps)
    kappa = math.sqrt(2 * beta * Ps * Nd / (2 * h * h * beta * Ps + Nd))
    b = kappa * hi * np.sqrt(2 / (2 * beta * Ps + Nr))
    d = 2 * hi * hi * Nr / (2 * beta * Ps + Nr)
    return a, b, d


def halfduplex_objective(topo: HalfDuplex, beta: float, relay_powers) -> float:
    """log2(1 + 2h^2 beta Ps/Nd) + log2(1 + M/N) with M, N as defined for the
    amplify-forward scheme (four times the rate)."""
    Ps, PR, h, hi, Nr, Nd = _hd_params(topo)
    P = np.asarray(relay_powers, dtype=float)
    M = (h * math.sqrt(2 * (1 - beta) * Ps)
         + math.sqrt(2 * beta * Ps * Nd / (2 * h * h * beta * Ps + Nd))
         * float(np.sum(np.sqrt(2 * hi * hi * P / (2 * beta * Ps + Nr))))) ** 2
    N = float(np.sum(2 * hi * hi * P * Nr / (2 * beta * Ps + Nr))) + Nd
    return log2_1p(2 * h * h * beta * Ps / Nd) + log2_1p(M / N)


def _hd_inner(topo, beta):
    Ps, PR, h, _, _, Nd = _hd_params(topo)
    first = log2_1p(2 * h * h * beta * Ps / Nd)
    if topo.relay_powers is not None:
        return halfduplex_objective(topo, beta, topo.relay_powers), np.asarray(topo.relay_powers)
    a, b, d = _hd_snr_terms(topo, beta)
    snr, s = max_snr_ratio(a, b, d, Nd, PR)
    return first + log2_1p(snr), s * s


def halfduplex_sufficient(topo: HalfDuplex) -> tuple[float, AllocationResult]:
    """Achievable rate of the amplify-forward scheme; beta and powers are
    optimized unless fixed on the topology."""
    if topo.beta is not None:
        beta = topo.beta
        val, P = _hd_inner(topo, beta)
    else:
        beta, _ = maximize_over_beta(lambda b: _hd_inner(topo, b)[0])
        val, P = _hd_inner(topo, beta)
    rate = val / 4
    return rate, AllocationResult(_frozen(P), beta=beta, objective=rate)


def twohop_rates(Ps, Pr, Nr, Nd, c, L) -> tuple[float, float]:
    """Closed-form (necessary, sufficient) rates for identical relays and no
    direct link."""
    nec = log2_1p(2 * L * Ps / Nr) / 4
    suf = log2_1p(4 * L * L * c * c * Ps * Pr / (2 * L * c * c * Pr * Nr + Nd * (2 * Ps + Nr))) / 4
    return nec, suf


def twohop_gap_symmetric(Ps, Pr, Nr, Nd, c, L) -> float:
    num = (4 * Ps * Ps * Nd + 2 * Ps * Nr * Nd) / L
    den = 4 * c * c * Ps * Pr * Nr + 2 * c * c * Pr * Nr * Nr / L + Nd * Nr * (2 * Ps + Nr) / (L * L)
    return log2_1p(num / den) / 4


# ----------------------------------------------------------- full-duplex

def fullduplex_necessary(topo: FullDuplex) -> float:
    Ps, PR, h, hi, Nr, Nd = _hd_params(topo)
    if Ps == 0:
        return 0.0
    first = log2_1p(Ps * (float(np.sum(1 / Nr)) + h * h / Nd))
    a = np.sqrt(Ps / (Ps + Nr))
    g, _ = max_correlated_cut(hi * hi * (1 - a * a), a * hi, h * math.sqrt(Ps), PR)
    return min(first, log2_1p(g / Nd)) / 2


def _fd_terms(topo):
    Ps, PR, h, hi, Nr, Nd = _hd_params(topo)
    a = h * math.sqrt(Ps)
    b = hi * np.sqrt(Ps / (Ps + Nr))
    d = hi * hi * Nr / (Ps + Nr)
    return a, b, d, Nd


def _fd_snr(a, b, d, Nd, s, eta0=None):
    B = float(b @ s)
    D = Nd + float(d @ (s * s))
    eta = _eta_root(B, 2 * a * B, a * a + D, D, eta0)
    return (a + eta * B) ** 2 / D, eta, B, D


def fullduplex_objective(topo: FullDuplex, relay_powers) -> tuple[float, float]:
    """(SNR, eta*) at the given relay powers."""
    if topo.source_power == 0:
        return 0.0, 1.0
    a, b, d, Nd = _fd_terms(topo)
    snr, eta, _, _ = _fd_snr(a, b, d, Nd, np.sqrt(np.asarray(relay_powers, dtype=float)))
    return snr, eta


def fullduplex_sufficient(topo: FullDuplex) -> tuple[float, AllocationResult]:
    Ps, PR, h, hi, Nr, Nd = _hd_params(topo)
    L = hi.size
    if Ps == 0:
        return 0.0, AllocationResult(_frozen(np.zeros(L)), eta_star=1.0, objective=0.0)
    if topo.relay_powers is not None or L == 0 or PR == 0:
        P = topo.relay_powers if topo.relay_powers is not None else np.zeros(L)
        snr, eta = fullduplex_objective(topo, P)
        rate = log2_1p(snr) / 2
        return rate, AllocationResult(_frozen(P), eta_star=eta, objective=rate)
    a, b, d, Nd = _fd_terms(topo)
    R = math.sqrt(PR)
    state = {"eta": None}

    def f(s):
        snr, eta, _, _ = _fd_snr(a, b, d, Nd, s, state["eta"])
        state["eta"] = eta
        return snr

    def grad(s):
        snr, eta, B, D = _fd_snr(a, b, d, Nd, s, state["eta"])
        # implicit derivative of the quartic root
        dp_de = ((4 * B * eta + 6 * a * B) * eta + 2 * (a * a + D)) * eta
        dp_dB = eta ** 4 + 2 * a * eta ** 3
        dp_dD = eta * eta - 1
        dD = 2 * d * s
        de = -(dp_dB * b + dp_dD * dD) / dp_de
        num = a + eta * B
        return (2 * num * (eta * b + B * de) * D - num * num * dD) / (D * D)

    starts = [np.full(L, R / math.sqrt(L))]
    eta0 = _fd_snr(a, b, d, Nd, starts[0])[1]
    starts.append(max_snr_ratio(a, eta0 * b, d, Nd, PR)[1])
    best = None
    for s0 in starts:
        try:
            s, val = projected_ascent(f, s0, lambda z: project_ball_orthant(z, R), grad=grad,
                                      tol=1e-12)
        except OptimizationError as err:
            s, val = err.best
        if best is None or val > best[1]:
            best = (s, val)
    s = best[0]
    snr, eta = fullduplex_objective(topo, s * s)
    rate = log2_1p(snr) / 2
    return rate, AllocationResult(_frozen(s * s), eta_star=eta, objective=rate)


# ---------------------------------------------------------- certificates

@dataclass(frozen=True)
class StabilityCertificate:
    necessary_rate: float
    sufficient_rate: float
    achieving_alloc: AllocationResult
    boundary_flag: bool = False


@dataclass(frozen=True)
class StabilityVerdict:
    kind: str  # "stabilizable" | "not_stabilizable" | "indeterminate"
    log_volume: float
    certificate: StabilityCertificate
    at_boundary: bool = False


STABILIZABLE = "stabilizable"
NOT_STABILIZABLE = "not_stabilizable"
INDETERMINATE = "indeterminate"


def certificate(topo) -> StabilityCertificate:
    if isinstance(topo, Cascade):
        nec = cascade_necessary(topo)
        suf, alloc = cascade_sufficient(topo)
    elif isinstance(topo, Parallel):
        nec = parallel_necessary(topo)
        suf, alloc = parallel_sufficient(topo)
    elif isinstance(topo, HalfDuplex):
        nec = halfduplex_necessary(topo)
        suf, alloc = halfduplex_sufficient(topo)
    elif isinstance(topo, FullDuplex):
        nec = fullduplex_necessary(topo)
        suf, alloc = fullduplex_sufficient(topo)
    elif isinstance(topo, TimeShare):
        nec = suf = topo.capacity
        alloc = AllocationResult(_frozen([]), objective=suf)
    else:
        raise TypeError(f"unknown topology {type(topo).__name__}")
    return StabilityCertificate(nec, suf, alloc)


def verdict(plant: PlantModel, topo, cert: StabilityCertificate | None = None) -> StabilityVerdict:
    cert = cert or certificate(topo)
    vol = unstable_log_volume(plant)
    tol = 1e-12
    if vol < cert.sufficient_rate:
        kind = STABILIZABLE
    elif vol > cert.necessary_rate:
        kind = NOT_STABILIZABLE
    else:
        kind = INDETERMINATE
        cert = replace(cert, boundary_flag=True)
    edge = abs(vol - cert.sufficient_rate) <= tol or abs(vol - cert.necessary_rate) <= tol
    return StabilityVerdict(kind, vol, cert, edge)
