"""Monte Carlo harness: reproducible closed-loop trials, second-moment
traces, stability classification and empirical threshold search."""
from __future__ import annotations

import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .bounds import certificate
from .model import PlantModel, unstable_log_volume
from .schemes import Scheme, SchemeState, make_scheme, scheme_threshold

STABLE = "Stable"
DIVERGENT = "Divergent"
INDETERMINATE = "Indeterminate"

OVERFLOW = 1e12
SLOPE_TOL = 0.01
TAIL_FACTOR = 10.0
DEFAULT_HORIZON = 20_000
DEFAULT_TRIALS = 256


@dataclass(frozen=True)
class SeedPolicy:
    """Per-trial counter-based streams keyed by (master seed, trial index).

    Each trial owns a Philox generator consumed in (step, channel) order, so
    a trial's draws do not depend on which other trials run or in what
    order.
    """
    seed: int

    def generator(self, trial: int) -> np.random.Generator:
        ss = np.random.SeedSequence([int(self.seed) & (2 ** 64 - 1), int(trial)])
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class MomentTrace:
    checkpoints: np.ndarray     # time index of each checkpoint
    moments: np.ndarray         # mean of |X_t|^2 over surviving trials
    stderr: np.ndarray
    n_divergent: np.ndarray     # trials stopped by the overflow guard so far
    trials: int
    init_var: float
    analytic: np.ndarray | None = None   # scheme's own variance recursion
    verdict: str | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("checkpoint,moment,stderr,n_divergent_trials,analytic\n")
        an = self.analytic if self.analytic is not None else np.full(self.moments.size, np.nan)
        for row in zip(self.checkpoints, self.moments, self.stderr, self.n_divergent, an):
            buf.write(f"{int(row[0])},{row[1]:.12g},{row[2]:.12g},{int(row[3])},{row[4]:.12g}\n")
        return buf.getvalue()


def _threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("RELAYNET_THREADS")
        threads = int(env) if env else min(4, os.cpu_count() or 1)
    return max(1, int(threads))


def _zero_rows(state: SchemeState, dead: np.ndarray) -> SchemeState:
    upd = {}
    for f in fields(state):
        v = getattr(state, f.name)
        if isinstance(v, np.ndarray) and v.ndim >= 1 and v.shape[0] == dead.size and f.name != "cov":
            mask = dead.reshape((-1,) + (1,) * (v.ndim - 1))
            upd[f.name] = np.where(mask, 0.0, v)
    return replace(state, **upd)


def _checkpoint_calls(scheme: Scheme, horizon: int, checkpoints: int) -> np.ndarray:
    calls = horizon // scheme.step_len
    rounds = calls // scheme.round_len
    if rounds < 1:
        raise ValueError("horizon shorter than one scheme round")
    every = max(1, rounds // checkpoints)
    return np.arange(every, rounds + 1, every) * scheme.round_len


def _run_chunk(scheme: Scheme, policy: SeedPolicy, trials: range, ck_calls: np.ndarray,
               block: int, overflow: float):
    """Squared norms at the checkpoints for a contiguous block of trials;
    NaN marks trials stopped by the overflow guard."""
    gens = [policy.generator(i) for i in trials]
    n = scheme.plant.n
    S0 = np.linalg.cholesky(scheme.plant.init_var) if np.all(np.linalg.eigvalsh(scheme.plant.init_var) > 0) \
        else np.zeros((n, n))
    x0 = np.stack([g.standard_normal(n) for g in gens]) @ S0.T
    state = scheme.initial(x0[:, 0] if scheme.plant.is_scalar else x0)
    m = len(gens)
    dead = np.zeros(m, dtype=bool)
    out = np.full((m, ck_calls.size), np.nan)
    analytic = np.full(ck_calls.size, np.inf)
    total = int(ck_calls[-1])
    k = 0
    done = 0
    with np.errstate(all="ignore"):
        while done < total and not np.all(dead):
            nb = min(block, total - done)
            z = np.stack([g.standard_normal((nb, scheme.channels)) for g in gens], axis=1)
            for j in range(nb):
                if np.all(dead):
                    break
                state = scheme.step(state, z[j])
                done += 1
                x = state.x
                sq = x * x if x.ndim == 1 else np.sum(x * x, axis=1)
                blown = ~(sq <= overflow)
                if np.any(blown & ~dead):
                    dead |= blown
                if np.any(dead):
                    state = _zero_rows(state, dead)
                    sq = np.where(dead, 0.0, sq)
                if k < ck_calls.size and done == ck_calls[k]:
                    out[:, k] = np.where(dead, np.nan, sq)
                    analytic[k] = state.alpha
                    k += 1
    return out, analytic


def run_trials(scheme: Scheme, horizon: int = DEFAULT_HORIZON, trials: int = DEFAULT_TRIALS,
               seed: int = 0, checkpoints: int = 200, chunk: int = 512, block: int = 256,
               threads: int | None = None, overflow: float = OVERFLOW, classify_kw=None
               ) -> MomentTrace:
    """Run independent closed-loop trials and summarize E|X_t|^2.

    Trials are split into fixed chunks that may run concurrently; per-trial
    values are assembled before any reduction, so the result is identical
    for every degree of parallelism.
    """
    if horizon < 100 or trials < 1:
        raise ValueError("need horizon >= 100 and trials >= 1")
    policy = SeedPolicy(seed)
    ck = _checkpoint_calls(scheme, horizon, checkpoints)
    ranges = [range(i, min(i + chunk, trials)) for i in range(0, trials, chunk)]
    nt = _threads(threads)
    if nt > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(nt) as ex:
            parts = list(ex.map(lambda r: _run_chunk(scheme, policy, r, ck, block, overflow), ranges))
    else:
        parts = [_run_chunk(scheme, policy, r, ck, block, overflow) for r in ranges]
    sq = np.concatenate([p[0] for p in parts], axis=0)
    analytic = np.min([p[1] for p in parts], axis=0)
    alive = ~np.isnan(sq)
    n_alive = alive.sum(axis=0)
    filled = np.where(alive, sq, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = filled.sum(axis=0) / n_alive
        var = np.where(alive, (sq - mean) ** 2, 0.0).sum(axis=0) / np.maximum(n_alive - 1, 1)
        stderr = np.sqrt(var / n_alive)
    trace = MomentTrace(ck * scheme.step_len, mean, stderr, trials - n_alive, trials,
                        float(np.trace(scheme.plant.init_var)), analytic)
    verdict = classify(trace, analytic_limit(trace), **(classify_kw or {}))
    return replace(trace, verdict=verdict)


def _log_slope(t, m) -> float:
    half = t.size // 2
    tt, mm = t[half:].astype(float), m[half:]
    if np.any(~np.isfinite(mm)) or np.any(mm <= 0):
        return math.inf if np.any(~np.isfinite(mm)) else 0.0
    return float(np.polyfit(tt, np.log(mm), 1)[0])


def analytic_limit(trace: MomentTrace, tol: float = 1e-6) -> float | None:
    """Tail maximum of the scheme's analytic variance when it has settled."""
    a = trace.analytic
    if a is None or a.size < 2 or not np.all(np.isfinite(a)):
        return None
    if _log_slope(trace.checkpoints, a) > tol:
        return None
    return float(np.max(a[a.size // 2:]))


def classify(trace: MomentTrace, analytic_limit: float | None = None,
             slope_tol: float = SLOPE_TOL, tail_factor: float = TAIL_FACTOR) -> str:
    """Divergent on overflow or a last-half log-moment slope above
    ``slope_tol`` per step; Stable when the tail stays below
    tail_factor * max(analytic_limit, initial variance); else Indeterminate.
    A slope exactly at the tolerance is Indeterminate."""
    if trace.checkpoints.size < 10:
        raise ValueError("classify needs at least 10 checkpoints")
    if trace.n_divergent[-1] > 0:
        return DIVERGENT
    slope = _log_slope(trace.checkpoints, trace.moments)
    if slope > slope_tol:
        return DIVERGENT
    if slope == slope_tol:
        return INDETERMINATE
    ref = max(analytic_limit or 0.0, trace.init_var)
    tail = trace.moments[trace.moments.size // 2:]
    return STABLE if float(np.max(tail)) < tail_factor * ref else INDETERMINATE


# ------------------------------------------------------ threshold search

def plant_at(template: PlantModel, lam: float) -> PlantModel:
    """Template plant with every diagonal entry of A replaced by lam."""
    A = np.array(template.A, dtype=float)
    np.fill_diagonal(A, lam)
    return PlantModel(A, template.B, template.noise_var, template.init_var)


@dataclass(frozen=True)
class ThresholdResult:
    lam_hat: float
    lam_lo: float        # largest lam seen not divergent
    lam_hi: float        # smallest lam seen divergent
    log_volume: float    # log2|det A| at lam_hat
    necessary: float
    sufficient: float
    scheme_rate: float   # exact threshold of the scheme, when known
    evaluations: int


class BracketError(RuntimeError):
    pass


def threshold_search(scheme_id: str, template: PlantModel, topo, lam_lo: float, lam_hi: float,
                     seed: int = 0, horizon: int = DEFAULT_HORIZON, trials: int = DEFAULT_TRIALS,
                     rel_width: float = 0.01, budget: int = 40, slope_tol: float = 1e-3,
                     threads: int | None = None, **scheme_kw) -> ThresholdResult:
    """Bisect lam between a non-divergent and a divergent end until the
    bracket is within ``rel_width`` relative width.  All evaluations share
    the seed (common random numbers)."""
    evals = 0

    def ok(lam):
        nonlocal evals
        evals += 1
        sch = make_scheme(scheme_id, plant_at(template, lam), topo, **scheme_kw)
        tr = run_trials(sch, horizon, trials, seed, threads=threads,
                        classify_kw={"slope_tol": slope_tol})
        return tr.verdict != DIVERGENT

    lo, hi = float(lam_lo), float(lam_hi)
    if not ok(lo) or ok(hi):
        raise BracketError(f"no sign change between lam={lo} and lam={hi}")
    while hi - lo > rel_width * lo:
        if evals >= budget:
            raise BracketError("evaluation budget exhausted before reaching the width")
        mid = math.sqrt(lo * hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    lam_hat = math.sqrt(lo * hi)
    plant = plant_at(template, lam_hat)
    cert = certificate(topo)
    rate = scheme_threshold(make_scheme(scheme_id, plant, topo, **scheme_kw))
    return ThresholdResult(lam_hat, lo, hi, unstable_log_volume(plant), cert.necessary_rate,
                           cert.sufficient_rate, rate, evals)
