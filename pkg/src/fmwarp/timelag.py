"""First-order time-lag dynamics for dead fuel moisture.

A dead fuel element relaxes toward an equilibrium moisture content X(t)
with characteristic time lag tau (hours):

    dm/dt = (X(t) - m(t)) / tau

Solving over a 1-hour step with X held constant within the step gives the
discrete recursion

    m_t = a * m_{t-1} + (1 - a) * X_t,      a = exp(-1/tau)

so each step is a weighted average of the previous state and the current
input. Rescaling time by a factor gamma (a "time warp") raises the
retention coefficient to the power gamma, i.e. a -> a**gamma, which is
the same recursion with tau' = tau / gamma.

The drying and wetting equilibrium moisture contents are computed from
air temperature and relative humidity with the Van Wagner equations in
the form used by the WRF-SFIRE fuel moisture code (temperature converted
from Kelvin internally; RH in percent; result in percent of dry mass):

    E_d = 0.924 H^0.679 + 0.000499 e^(0.1 H) + 0.18 (21.1 - T_C)(1 - e^(-0.115 H))
    E_w = 0.618 H^0.753 + 0.000454 e^(0.1 H) + 0.18 (21.1 - T_C)(1 - e^(-0.115 H))

All functions are pure and operate on immutable inputs; the time step is
fixed at 1 hour throughout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from fmwarp.errors import InvalidInputError

logger = logging.getLogger(__name__)

# Van Wagner equilibrium constants (drying / wetting branches).
_ED_COEF = (0.924, 0.679, 0.000499)
_EW_COEF = (0.618, 0.753, 0.000454)
_TEMP_COEF = 0.18
_TEMP_REF_C = 21.1
_RH_EXP = 0.115
_KELVIN_OFFSET = 273.15

# Count of drying < wetting inversions repaired by clamping, for diagnostics.
_clamp_count = 0


@dataclass(frozen=True)
class TimeLagParams:
    """Characteristic time lag tau (hours) and retention coefficient a = exp(-1/tau)."""

    tau: float
    a: float

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise InvalidInputError(f"tau must be finite and > 0, got {self.tau}")
        if not (0.0 < self.a < 1.0):
            raise InvalidInputError(f"retention coefficient must lie in (0,1), got {self.a}")
        # Tolerance covers ulp drift when a arrives as a**gamma instead of exp().
        if abs(self.a - math.exp(-1.0 / self.tau)) > 1e-13:
            raise InvalidInputError(
                f"inconsistent pair: a={self.a!r} but exp(-1/tau)={math.exp(-1.0 / self.tau)!r}"
            )

    @classmethod
    def from_tau(cls, tau: float) -> "TimeLagParams":
        return cls(tau=float(tau), a=math.exp(-1.0 / float(tau)))

    @classmethod
    def from_retention(cls, a: float) -> "TimeLagParams":
        a = float(a)
        if not (0.0 < a < 1.0):
            raise InvalidInputError(f"retention coefficient must lie in (0,1), got {a}")
        return cls(tau=-1.0 / math.log(a), a=a)


@dataclass(frozen=True)
class WarpFactor:
    """Temporal rescaling factor gamma > 0; gamma > 1 speeds the dynamics up."""

    gamma: float

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise InvalidInputError(f"gamma must be finite and > 0, got {self.gamma}")


@dataclass(frozen=True)
class EquilibriumPair:
    """Drying and wetting equilibrium moisture contents, percent of dry mass."""

    drying: float
    wetting: float


def step(m_prev: float, x: float, params: TimeLagParams) -> float:
    """Advance the moisture state by one hour.

    Returns a*m_prev + (1-a)*x, a convex combination, so the result lies
    between m_prev and x.
    """
    if not (math.isfinite(m_prev) and math.isfinite(x)):
        raise InvalidInputError(f"non-finite state or input: m_prev={m_prev}, x={x}")
    return params.a * m_prev + (1.0 - params.a) * x


def simulate(m0: float, x_series, params: TimeLagParams) -> np.ndarray:
    """Run the recursion from m0 over a sequence of equilibrium inputs.

    Element t of the output is the state after step t+1, i.e. the response
    to x_series[t]. Output length equals input length.
    """
    x = np.asarray(x_series, dtype=float)
    if x.size == 0:
        raise InvalidInputError("x_series must be non-empty")
    if not (math.isfinite(m0) and np.isfinite(x).all()):
        raise InvalidInputError("non-finite initial state or input series")
    out = np.empty(x.size)
    m = float(m0)
    a = params.a
    b = 1.0 - a
    for t in range(x.size):
        m = a * m + b * x[t]
        out[t] = m
    return out


def warp(params: TimeLagParams, gamma: WarpFactor) -> TimeLagParams:
    """Time-warp the dynamics: a -> a**gamma, equivalently tau -> tau/gamma."""
    a_warped = params.a ** gamma.gamma
    return TimeLagParams(tau=params.tau / gamma.gamma, a=a_warped)


def equilibria(temp_k: float, rh: float) -> EquilibriumPair:
    """Drying/wetting equilibrium moisture from temperature (K) and RH (%).

    Uses the Van Wagner equations given in the module docstring. If the
    formula ever inverts the pair (drying < wetting) the values are
    swapped; inversions are counted and logged.
    """
    if not (0.0 <= rh <= 100.0):
        raise InvalidInputError(f"relative humidity must lie in [0,100], got {rh}")
    if not temp_k > 0.0:
        raise InvalidInputError(f"temperature must be positive Kelvin, got {temp_k}")
    t_c = temp_k - _KELVIN_OFFSET
    temp_term = _TEMP_COEF * (_TEMP_REF_C - t_c) * (1.0 - math.exp(-_RH_EXP * rh))
    cd, ed_exp, ed_rain = _ED_COEF
    cw, ew_exp, ew_rain = _EW_COEF
    drying = cd * rh**ed_exp + ed_rain * math.exp(0.1 * rh) + temp_term
    wetting = cw * rh**ew_exp + ew_rain * math.exp(0.1 * rh) + temp_term
    drying = max(drying, 0.0)
    wetting = max(wetting, 0.0)
    if wetting > drying:
        global _clamp_count
        _clamp_count += 1
        logger.warning(
            "equilibrium inversion clamped (temp_k=%s, rh=%s); %d so far",
            temp_k, rh, _clamp_count,
        )
        drying, wetting = wetting, drying
    return EquilibriumPair(drying=drying, wetting=wetting)


def equilibria_arrays(temp_k, rh) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`equilibria`; returns (drying, wetting) arrays."""
    temp_k = np.asarray(temp_k, dtype=float)
    rh = np.asarray(rh, dtype=float)
    if np.any((rh < 0.0) | (rh > 100.0)):
        raise InvalidInputError("relative humidity must lie in [0,100]")
    if np.any(temp_k <= 0.0):
        raise InvalidInputError("temperature must be positive Kelvin")
    t_c = temp_k - _KELVIN_OFFSET
    temp_term = _TEMP_COEF * (_TEMP_REF_C - t_c) * (1.0 - np.exp(-_RH_EXP * rh))
    cd, ed_exp, ed_rain = _ED_COEF
    cw, ew_exp, ew_rain = _EW_COEF
    drying = np.maximum(cd * rh**ed_exp + ed_rain * np.exp(0.1 * rh) + temp_term, 0.0)
    wetting = np.maximum(cw * rh**ew_exp + ew_rain * np.exp(0.1 * rh) + temp_term, 0.0)
    inverted = wetting > drying
    if inverted.any():
        global _clamp_count
        _clamp_count += int(inverted.sum())
        logger.warning("clamped %d equilibrium inversions", int(inverted.sum()))
        drying, wetting = np.where(inverted, wetting, drying), np.where(inverted, drying, wetting)
    return drying, wetting


def clamp_count() -> int:
    """Number of drying/wetting inversions repaired since import."""
    return _clamp_count
