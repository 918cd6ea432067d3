"""Plant and relay-network parameter containers.

All rates in the package are in bits (log base 2).  Topologies are frozen
dataclasses holding read-only numpy arrays; construction validates the
invariants that every downstream formula relies on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np


class ConfigError(ValueError):
    """Invalid plant, topology or configuration document."""


def _vec(x, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=float)).copy()
    if arr.ndim != 1:
        raise ConfigError(f"{name}: expected a 1-D list of numbers")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name}: entries must be finite")
    arr.setflags(write=False)
    return arr


def _scalar(x, name: str) -> float:
    try:
        v = float(x)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a number") from None
    if not math.isfinite(v):
        raise ConfigError(f"{name}: must be finite")
    return v


def _nonneg(x, name):
    v = _scalar(x, name)
    if v < 0:
        raise ConfigError(f"{name}: must be >= 0")
    return v


def _positive(x, name):
    v = _scalar(x, name)
    if v <= 0:
        raise ConfigError(f"{name}: must be > 0")
    return v


def _set(obj, name, value):
    object.__setattr__(obj, name, value)


BUDGET_TOL = 1e-12


def over_budget(powers, budget: float) -> bool:
    """Sum exceeds the budget beyond rounding (relative tolerance)."""
    return float(np.sum(powers)) > budget + BUDGET_TOL * max(1.0, budget)


def _check_powers(obj, n: int):
    if obj.relay_powers is None:
        return
    p = _vec(obj.relay_powers, "relay_powers")
    if p.size != n:
        raise ConfigError(f"relay_powers: expected {n} entries, got {p.size}")
    if np.any(p < 0):
        raise ConfigError("relay_powers: must be >= 0")
    if over_budget(p, obj.relay_budget):
        raise ConfigError("relay_powers: budget exceeded")
    _set(obj, "relay_powers", p)


# ---------------------------------------------------------------- plant

@dataclass(frozen=True)
class PlantModel:
    """LTI plant X_{t+1} = A X_t + B U_t + W_t.

    ``noise_var`` and ``init_var`` are covariance matrices; scalars are
    promoted to multiples of the identity.
    """

    A: np.ndarray
    B: np.ndarray
    noise_var: np.ndarray
    init_var: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ConfigError("A: must be square")
        B = np.asarray(self.B, dtype=float)
        B = B.reshape(n, -1) if B.ndim < 2 else B
        if B.shape[0] != n:
            raise ConfigError("B: row count must match A")
        mats = {}
        for name in ("noise_var", "init_var"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.ndim == 0:
                M = float(M) * np.eye(n)
            elif M.ndim == 1:
                M = np.diag(M)
            if M.shape != (n, n):
                raise ConfigError(f"{name}: expected scalar or {n}x{n} matrix")
            mats[name] = M
        for name, M in (("A", A), ("B", B), *mats.items()):
            if not np.all(np.isfinite(M)):
                raise ConfigError(f"{name}: entries must be finite")
            M.setflags(write=False)
            _set(self, name, M)

    @classmethod
    def scalar(cls, lam: float, noise_var: float = 1.0, init_var: float = 1.0) -> "PlantModel":
        return cls([[lam]], [[1.0]], noise_var, init_var)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def is_scalar(self) -> bool:
        return self.A.shape == (1, 1)

    @property
    def lam(self) -> float:
        if not self.is_scalar:
            raise ConfigError("plant is not scalar")
        return float(self.A[0, 0])

    @property
    def n_w(self) -> float:
        return float(self.noise_var[0, 0])


# ------------------------------------------------------------ topologies

@dataclass(frozen=True)
class Cascade:
    """Serial chain: sensor -> relay 1 -> ... -> relay L-1 -> controller.

    ``noise_vars`` holds N_1..N_L (one per hop); relay i transmits over hop
    i+1 with power ``relay_powers[i]``.
    """

    source_power: float
    relay_budget: float
    noise_vars: np.ndarray
    relay_powers: np.ndarray | None = None

    def __post_init__(self):
        _set(self, "source_power", _nonneg(self.source_power, "source_power"))
        _set(self, "relay_budget", _nonneg(self.relay_budget, "relay_budget"))
        N = _vec(self.noise_vars, "noise_vars")
        if N.size < 1:
            raise ConfigError("noise_vars: cascade needs at least one hop")
        if N[0] < 0 or np.any(N[1:] <= 0):
            raise ConfigError("noise_vars: need N_1 >= 0 and relay-hop noises > 0")
        _set(self, "noise_vars", N)
        _check_powers(self, N.size - 1)

    @property
    def hops(self) -> int:
        return self.noise_vars.size

    @property
    def n_relays(self) -> int:
        return self.noise_vars.size - 1


@dataclass(frozen=True)
class Parallel:
    """Sensor broadcasts to L relays; relays reach the controller on
    orthogonal channels."""

    source_power: float
    relay_budget: float
    relay_noise: np.ndarray
    controller_noise: np.ndarray
    relay_powers: np.ndarray | None = None

    def __post_init__(self):
        _set(self, "source_power", _nonneg(self.source_power, "source_power"))
        _set(self, "relay_budget", _nonneg(self.relay_budget, "relay_budget"))
        nr = _vec(self.relay_noise, "relay_noise")
        nd = _vec(self.controller_noise, "controller_noise")
        if nd.size == 1 and nr.size > 1:
            nd = _vec(np.full(nr.size, nd[0]), "controller_noise")
        if nr.size < 1 or nr.size != nd.size:
            raise ConfigError("relay_noise/controller_noise: need matching lengths >= 1")
        if np.any(nr < 0) or np.any(nd < 0):
            raise ConfigError("relay_noise/controller_noise: must be >= 0")
        _set(self, "relay_noise", nr)
        _set(self, "controller_noise", nd)
        _check_powers(self, nr.size)

    @property
    def n_relays(self) -> int:
        return self.relay_noise.size


@dataclass(frozen=True)
class HalfDuplex:
    """Non-orthogonal half-duplex network.

    Odd slots: the sensor reaches relays and controller with power 2*beta*Ps.
    Even slots: sensor (power 2*(1-beta)*Ps) and relays (power 2*Pr_i)
    superimpose at the controller.  ``beta`` and ``relay_powers`` are
    optimized when left as None.
    """

    source_power: float
    relay_budget: float
    direct_gain: float
    relay_gains: np.ndarray
    relay_noise: np.ndarray
    controller_noise: float
    beta: float | None = None
    relay_powers: np.ndarray | None = None

    def __post_init__(self):
        _set(self, "source_power", _nonneg(self.source_power, "source_power"))
        _set(self, "relay_budget", _nonneg(self.relay_budget, "relay_budget"))
        _set(self, "direct_gain", _scalar(self.direct_gain, "direct_gain"))
        _set(self, "controller_noise", _positive(self.controller_noise, "controller_noise"))
        g = _vec(self.relay_gains, "relay_gains") if np.size(self.relay_gains) else _vec([], "relay_gains")
        nr = _vec(self.relay_noise, "relay_noise") if np.size(self.relay_noise) else _vec([], "relay_noise")
        if g.size != nr.size:
            raise ConfigError("relay_gains/relay_noise: lengths differ")
        if np.any(nr <= 0):
            raise ConfigError("relay_noise: must be > 0")
        _set(self, "relay_gains", g)
        _set(self, "relay_noise", nr)
        if self.beta is not None:
            b = _scalar(self.beta, "beta")
            if not 0 < b <= 1:
                raise ConfigError("beta: must lie in (0, 1]")
            _set(self, "beta", b)
        _check_powers(self, g.size)

    @property
    def n_relays(self) -> int:
        return self.relay_gains.size


@dataclass(frozen=True)
class TwoHop(HalfDuplex):
    """Half-duplex network without a direct link, sensor power all in phase 1."""

    direct_gain: float = 0.0
    relay_gains: np.ndarray = field(default_factory=lambda: np.ones(1))
    relay_noise: np.ndarray = field(default_factory=lambda: np.ones(1))
    controller_noise: float = 1.0
    beta: float | None = 1.0

    def __post_init__(self):
        super().__post_init__()
        if self.direct_gain != 0.0:
            raise ConfigError("direct_gain: two-hop network requires h = 0")
        if self.beta != 1.0:
            raise ConfigError("beta: two-hop network requires beta = 1")
        if self.relay_gains.size < 1:
            raise ConfigError("relay_gains: two-hop network needs at least one relay")

    @classmethod
    def symmetric(cls, relays: int, source_power: float, relay_power: float,
                  relay_noise: float = 1.0, controller_noise: float = 1.0,
                  gain: float = 1.0) -> "TwoHop":
        L = int(relays)
        if L < 1:
            raise ConfigError("relays: must be >= 1")
        return cls(source_power=source_power, relay_budget=L * relay_power,
                   relay_gains=np.full(L, gain), relay_noise=np.full(L, relay_noise),
                   controller_noise=controller_noise, relay_powers=np.full(L, relay_power))


@dataclass(frozen=True)
class FullDuplex:
    """Non-orthogonal full-duplex network: relays forward every slot."""

    source_power: float
    relay_budget: float
    direct_gain: float
    relay_gains: np.ndarray
    relay_noise: np.ndarray
    controller_noise: float
    relay_powers: np.ndarray | None = None

    def __post_init__(self):
        _set(self, "source_power", _nonneg(self.source_power, "source_power"))
        _set(self, "relay_budget", _nonneg(self.relay_budget, "relay_budget"))
        _set(self, "direct_gain", _scalar(self.direct_gain, "direct_gain"))
        _set(self, "controller_noise", _positive(self.controller_noise, "controller_noise"))
        g = _vec(self.relay_gains, "relay_gains") if np.size(self.relay_gains) else _vec([], "relay_gains")
        nr = _vec(self.relay_noise, "relay_noise") if np.size(self.relay_noise) else _vec([], "relay_noise")
        if g.size != nr.size:
            raise ConfigError("relay_gains/relay_noise: lengths differ")
        if np.any(nr <= 0):
            raise ConfigError("relay_noise: must be > 0")
        _set(self, "relay_gains", g)
        _set(self, "relay_noise", nr)
        _check_powers(self, g.size)

    @property
    def n_relays(self) -> int:
        return self.relay_gains.size


@dataclass(frozen=True)
class TimeShare:
    """Point-to-point scalar Gaussian channel of capacity ``capacity`` bits
    per use, shared across the modes of a vector plant."""

    capacity: float

    def __post_init__(self):
        _set(self, "capacity", _nonneg(self.capacity, "capacity"))


Topology = Union[Cascade, Parallel, HalfDuplex, FullDuplex, TimeShare]


# ----------------------------------------------------------- spectral

def eigenvalues(plant: PlantModel) -> np.ndarray:
    return np.linalg.eigvals(plant.A)


def unstable_log_volume(plant: PlantModel) -> float:
    """log2|det A|, summed over eigenvalue magnitudes."""
    mags = np.abs(eigenvalues(plant))
    if np.any(mags == 0):
        raise ConfigError("A: singular system matrix")
    return float(np.sum(np.log2(mags)))


@dataclass(frozen=True)
class ModeList:
    eigenvalues: np.ndarray
    fractions: np.ndarray
    multiplicities: tuple


def mode_decomposition(plant: PlantModel, rtol: float = 1e-9) -> ModeList:
    """Eigenvalues with their time-share fractions log|l_m| / sum log|l_i|."""
    lam = eigenvalues(plant)
    mags = np.abs(lam)
    if np.any(np.abs(mags - 1.0) <= rtol) or np.any(mags < 1.0):
        raise ConfigError("A: marginally unstable or stable mode, fraction undefined")
    logs = np.log2(mags)
    fr = logs / logs.sum()
    # group repeated eigenvalues for reporting
    mult = []
    for i, l in enumerate(lam):
        if any(abs(l - lam[j]) <= rtol * max(1.0, abs(l)) for j in range(i)):
            continue
        mult.append((complex(l), int(np.sum(np.abs(lam - l) <= rtol * max(1.0, abs(l))))))
    return ModeList(lam, fr, tuple(mult))


def validate(plant: PlantModel | None = None, topo: Topology | None = None) -> list[str]:
    """Report-style validation; an empty list means valid."""
    issues = []
    if plant is not None:
        mags = np.abs(eigenvalues(plant))
        if np.any(mags < 1.0):
            issues.append("eigenvalue inside unit disc")
        n = plant.n
        blocks = [plant.B]
        for _ in range(n - 1):
            blocks.append(plant.A @ blocks[-1])
        if np.linalg.matrix_rank(np.hstack(blocks)) < n:
            issues.append("(A, B) not controllable")
        for name in ("noise_var", "init_var"):
            M = getattr(plant, name)
            if not np.allclose(M, M.T):
                issues.append(f"{name} not symmetric")
            elif np.min(np.linalg.eigvalsh(M)) < -1e-12 * max(1.0, np.abs(M).max()):
                issues.append(f"{name} not positive semidefinite")
    if topo is not None:
        powers = getattr(topo, "relay_powers", None)
        if powers is not None and over_budget(powers, topo.relay_budget):
            issues.append("budget exceeded")
    return issues


# ------------------------------------------------------------- config

_PLANT_KEYS = {"A", "B", "noise_var", "init_var"}
_TOPO_KEYS = {
    "cascade": ({"source_power", "relay_budget", "noise_vars"}, {"relay_powers"}),
    "parallel": ({"source_power", "relay_budget", "relay_noise", "controller_noise"}, {"relay_powers"}),
    "half_duplex": ({"source_power", "relay_budget", "direct_gain", "relay_gains", "relay_noise",
                     "controller_noise"}, {"beta", "relay_powers"}),
    "full_duplex": ({"source_power", "relay_budget", "direct_gain", "relay_gains", "relay_noise",
                     "controller_noise"}, {"relay_powers"}),
    "two_hop": ({"relays", "source_power", "relay_power"}, {"relay_noise", "controller_noise", "gain"}),
    "timeshare": ({"capacity"}, set()),
}


def _check_keys(d, required, optional, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - required - optional
    if unknown:
        raise ConfigError(f"{where}: unknown key '{sorted(unknown)[0]}'")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"{where}: missing key '{sorted(missing)[0]}'")


def plant_from_dict(d: dict) -> PlantModel:
    _check_keys(d, {"A"}, _PLANT_KEYS - {"A"}, "plant")
    A = np.atleast_2d(np.asarray(d["A"], dtype=float))
    B = d.get("B", np.eye(A.shape[0]))
    return PlantModel(A, B, d.get("noise_var", 1.0), d.get("init_var", 1.0))


def topology_from_dict(d: dict) -> Topology:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError("topology: missing key 'kind'")
    kind = d["kind"]
    if kind not in _TOPO_KEYS:
        raise ConfigError(f"topology: unknown kind '{kind}'")
    req, opt = _TOPO_KEYS[kind]
    body = {k: v for k, v in d.items() if k != "kind"}
    _check_keys(body, req, opt, f"topology[{kind}]")
    if kind == "cascade":
        return Cascade(**body)
    if kind == "parallel":
        return Parallel(**body)
    if kind == "half_duplex":
        return HalfDuplex(**body)
    if kind == "full_duplex":
        return FullDuplex(**body)
    if kind == "two_hop":
        return TwoHop.symmetric(body["relays"], body["source_power"], body["relay_power"],
                                body.get("relay_noise", 1.0), body.get("controller_noise", 1.0),
                                body.get("gain", 1.0))
    return TimeShare(**body)


def load_config(d: dict) -> tuple[PlantModel | None, Topology]:
    """Parse a {"plant": ..., "topology": ...} document."""
    _check_keys(d, {"topology"}, {"plant"}, "config")
    plant = plant_from_dict(d["plant"]) if "plant" in d else None
    return plant, topology_from_dict(d["topology"])
