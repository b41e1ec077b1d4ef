"""Physical constants, the interrogated field and closed-form pair/spin physics.

Units are SI throughout (m, s, kg) except the magnetic field, which is kept in
gauss.  Gradients are therefore G/m (1 mG/mm == 1 G/m) and curvatures G/m^2.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import integrate

HBAR = 1.054_571_817e-34  # J s
MASS_HE4 = 6.646_477_3e-27  # kg
GAMMA_CYCLIC = 2.8e6  # "2.8 MHz/G"

GAMMA_CONVENTIONS = {
    "angular": 2.0 * np.pi * GAMMA_CYCLIC,
    "cyclic_as_angular": GAMMA_CYCLIC,
}

GammaConvention = Literal["angular", "cyclic_as_angular"]


class IntegrationError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


class SpinState(enum.IntEnum):
    """Two-level spin: Up is m_J = +1, Down is m_J = 0."""

    DOWN = 0
    UP = 1


UNCLASSIFIED = -1


@dataclass(frozen=True)
class PhysicalConstants:
    gamma: float = GAMMA_CONVENTIONS["angular"]  # rad s^-1 G^-1
    gravity_g: float = 9.80665
    fall_distance_d: float = 0.848
    mass_he4: float = MASS_HE4
    photon_wavevector: float = 2.0 * np.pi / 1.083e-6

    def __post_init__(self):
        for name in ("gamma", "gravity_g", "fall_distance_d", "mass_he4", "photon_wavevector"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def from_convention(cls, convention: GammaConvention = "angular", **kwargs) -> "PhysicalConstants":
        if convention not in GAMMA_CONVENTIONS:
            raise ValueError(f"unknown gamma convention {convention!r}")
        return cls(gamma=GAMMA_CONVENTIONS[convention], **kwargs)

    @property
    def t_star_stationary(self) -> float:
        """Fall time of an atom released at rest, sqrt(2 d / g)."""
        return float(np.sqrt(2.0 * self.fall_distance_d / self.gravity_g))

    @property
    def recoil_velocity(self) -> float:
        return HBAR * self.photon_wavevector / self.mass_he4


@dataclass(frozen=True)
class FieldModel:
    """B(r) = b0 + gradient . r + 1/2 r^T curvature r."""

    b0: float
    gradient: np.ndarray = field(default_factory=lambda: np.zeros(3))
    curvature: np.ndarray | None = None

    def __post_init__(self):
        grad = np.asarray(self.gradient, dtype=float).reshape(3)
        object.__setattr__(self, "gradient", grad)
        if self.curvature is not None:
            curv = np.asarray(self.curvature, dtype=float).reshape(3, 3)
            if not np.allclose(curv, curv.T):
                raise ValueError("curvature must be symmetric")
            if not np.any(curv):
                curv = None
            object.__setattr__(self, "curvature", curv)

    @property
    def is_linear(self) -> bool:
        return self.curvature is None


@dataclass(frozen=True)
class PairState:
    mixing_angle_phi: float
    direction: np.ndarray
    speed: float
    birth_time: float = 0.0
    source_position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("pair direction must be a unit vector")
        if not np.isfinite(self.mixing_angle_phi):
            raise ValueError("mixing angle must be finite")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "source_position", np.asarray(self.source_position, dtype=float).reshape(3))


def field_at(model: FieldModel, r) -> np.ndarray | float:
    """Field magnitude in gauss at position(s) ``r`` (shape (3,) or (n, 3))."""
    r = np.asarray(r, dtype=float)
    b = model.b0 + r @ model.gradient
    if model.curvature is not None:
        b = b + 0.5 * np.einsum("...i,ij,...j->...", r, model.curvature, r)
    return b


def _larmor_phase_quad(c: PhysicalConstants, model: FieldModel, r0, v, t0, t1) -> float:
    r0 = np.asarray(r0, dtype=float)
    v = np.asarray(v, dtype=float)

    def integrand(t):
        return field_at(model, r0 + v * t)

    val, err = integrate.quad(integrand, t0, t1, epsabs=0.0, epsrel=1e-13, limit=200)
    if not np.isfinite(val) or err > 1e-9 * max(abs(val), 1e-300):
        raise IntegrationError(f"larmor phase quadrature error estimate {err:g} too large")
    return c.gamma * val


def larmor_phase(c: PhysicalConstants, model: FieldModel, r0, v, t0: float, t1: float,
                 method: Literal["closed", "quad"] = "closed"):
    """Accumulated Larmor phase gamma * int_{t0}^{t1} B(r0 + v t) dt.

    ``r0`` and ``v`` may be stacked (n, 3) arrays; the closed form is exact for
    the quadratic field model because the integrand is a polynomial in t.
    ``method="quad"`` evaluates one trajectory by adaptive quadrature.
    """
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    if method == "quad":
        return _larmor_phase_quad(c, model, r0, v, t0, t1)
    r0 = np.asarray(r0, dtype=float)
    v = np.asarray(v, dtype=float)
    dt1, dt2, dt3 = t1 - t0, (t1**2 - t0**2) / 2.0, (t1**3 - t0**3) / 3.0
    integral = field_at(model, r0) * dt1 + (v @ model.gradient) * dt2
    if model.curvature is not None:
        C = model.curvature
        integral = integral + np.einsum("...i,ij,...j->...", r0, C, v) * dt2 \
            + 0.5 * np.einsum("...i,ij,...j->...", v, C, v) * dt3
    return c.gamma * integral


def bell_mixing_array(c: PhysicalConstants, model: FieldModel, direction, speed, tau,
                      source_position=None, birth_time=0.0):
    """Vectorised Bell mixing angle for pairs born at ``birth_time``.

    Atoms of a pair sit at r0 +/- v (t - t_b); the mixing angle is
    gamma/2 * int delta B dt with delta B = B(r0 + v s) - B(r0 - v s).
    """
    direction = np.asarray(direction, dtype=float)
    speed = np.asarray(speed, dtype=float)
    elapsed = np.asarray(tau, dtype=float) - birth_time
    if np.any(elapsed < 0):
        raise ValueError("readout time precedes pair birth")
    v = direction * speed[..., None] if np.ndim(speed) else direction * speed
    # delta B(s) = 2 (grad . v) s + 2 r0^T C v s  ->  integral over s in [0, elapsed]
    rate = v @ model.gradient
    if model.curvature is not None and source_position is not None:
        rate = rate + np.einsum("...i,ij,...j->...", np.asarray(source_position, dtype=float), model.curvature, v)
    return 0.5 * c.gamma * rate * elapsed**2


def bell_mixing(c: PhysicalConstants, model: FieldModel, pair: PairState, tau: float,
                method: Literal["closed", "quad"] = "closed") -> float:
    """Mixing angle Phi(tau) of one pair; ``tau`` is time since the collision."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if method == "closed":
        return float(bell_mixing_array(c, model, pair.direction, pair.speed, tau,
                                       pair.source_position, pair.birth_time))
    v = pair.direction * pair.speed
    r0, tb = pair.source_position, pair.birth_time

    def delta_b(t):
        s = t - tb
        return field_at(model, r0 + v * s) - field_at(model, r0 - v * s)

    if tau <= tb:
        return 0.0
    val, err = integrate.quad(delta_b, tb, tau, epsabs=1e-300, epsrel=1e-13, limit=200)
    if not np.isfinite(val) or err > 1e-9 * max(abs(val), 1e-300):
        raise IntegrationError(f"bell mixing quadrature error estimate {err:g} too large")
    return 0.5 * c.gamma * val


def pair_parity(phi):
    """Two-body x-basis correlator <sx sx> = cos 2 Phi."""
    return np.cos(2.0 * np.asarray(phi, dtype=float))


def joint_xbasis_distribution(phi) -> np.ndarray:
    """Outcome probabilities ordered (uu, ud, du, dd) along the last axis."""
    phi = np.asarray(phi, dtype=float)
    same = 0.5 * np.cos(phi) ** 2
    diff = 0.5 * np.sin(phi) ** 2
    return np.stack([same, diff, diff, same], axis=-1)


def ramsey_polarisation(phase, contrast: float):
    if not 0.0 <= contrast <= 1.0:
        raise ValueError("contrast must lie in [0, 1]")
    return contrast * np.cos(phase)


def sql_delta_b(c: PhysicalConstants, n_atoms: float, tau: float) -> float:
    """Standard quantum limit 1 / (gamma sqrt(N tau)) in gauss."""
    if n_atoms < 1 or tau <= 0:
        raise ValueError("need n_atoms >= 1 and tau > 0")
    return 1.0 / (c.gamma * np.sqrt(n_atoms * tau))


def _check_eta(eta):
    eta = np.asarray(eta, dtype=float)
    if np.any((eta <= 0) | (eta > 1)):
        raise ValueError("efficiency must lie in (0, 1]")
    return eta


def min_phase_ramsey(n, eta):
    """Coherent-spin phase bound 1/sqrt(N eta)."""
    eta = _check_eta(eta)
    if np.any(np.asarray(n) < 1):
        raise ValueError("n must be >= 1")
    return 1.0 / np.sqrt(n * eta)


def min_phase_bell(eta):
    """Bell-pair phase bound 1/(2 eta)."""
    return 1.0 / (2.0 * _check_eta(eta))


def bell_sql_threshold(tol: float = 1e-15) -> float:
    """Efficiency above which the Bell bound beats the N = 2 coherent bound (by bisection)."""
    target = min_phase_ramsey(2, 1.0)
    lo, hi = 1e-6, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if min_phase_bell(mid) < target:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)
