"""Monte Carlo scattering halos, interrogation sequences and the detection chain.

Pairs are independent point particles.  Every source of randomness is drawn
from an explicit :class:`numpy.random.Generator`; :func:`shot_rng` derives an
independent stream per (stage, tau index, shot index) so shots can be
generated in any order or on any number of workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy.special import erf

from .model import (
    FieldModel,
    PhysicalConstants,
    SpinState,
    bell_mixing_array,
    joint_xbasis_distribution,
    larmor_phase,
)


@dataclass(frozen=True)
class HaloConfig:
    mean_pairs_per_shot: float = 15000.0
    v_r: float = 0.060
    radial_width_frac: float = 0.03
    source_sigma: float = 50e-6 / np.sqrt(2.0)
    source_velocity_sigma: float = 0.6e-3
    polar_cap_deg: float = 60.0  # |elevation| above this is excluded
    mode_occupancy_nbar: float = 0.1

    def __post_init__(self):
        if self.mean_pairs_per_shot < 0:
            raise ValueError("mean_pairs_per_shot must be >= 0")
        if not 0 < self.radial_width_frac < 0.2:
            raise ValueError("radial_width_frac must lie in (0, 0.2)")
        if not 0 <= self.polar_cap_deg < 90:
            raise ValueError("polar_cap_deg must lie in [0, 90)")
        if self.v_r <= 0 or self.source_sigma <= 0 or self.source_velocity_sigma <= 0:
            raise ValueError("v_r, source_sigma and source_velocity_sigma must be positive")
        if self.mode_occupancy_nbar <= 0:
            raise ValueError("mode_occupancy_nbar must be positive")

    @property
    def thomas_fermi_radius(self) -> float:
        return self.source_sigma * np.sqrt(2.0)

    @property
    def separation_time(self) -> float:
        """t_sep = R_TF / (2 v_r), after which no more pairs are scattered."""
        return self.thomas_fermi_radius / (2.0 * self.v_r)

    @property
    def sin_cap(self) -> float:
        return float(np.sin(np.deg2rad(self.polar_cap_deg)))

    def mode_solid_angle(self, radial_window: tuple[float, float] | None = None) -> float:
        """Angular size of one momentum mode implied by ``mode_occupancy_nbar``.

        A mode is an angular cell of the shell; it holds on average 2 n_bar
        atoms (n_bar per spin after the readout pulse), counting only atoms
        whose normalised radius falls inside ``radial_window``.
        """
        frac = 1.0
        if radial_window is not None:
            lo, hi = radial_window
            s = self.radial_width_frac * np.sqrt(2.0)
            frac = 0.5 * (erf((hi - 1.0) / s) - erf((lo - 1.0) / s))
        if self.mean_pairs_per_shot <= 0:
            return 4.0 * np.pi
        area = 4.0 * np.pi * self.sin_cap
        atoms_per_sr = 2.0 * self.mean_pairs_per_shot * frac / area
        return 2.0 * self.mode_occupancy_nbar / atoms_per_sr


@dataclass(frozen=True)
class SequenceConfig:
    scheme: Literal["ramsey", "parity"] = "parity"
    pulse1_time: float = 3e-3
    interrogation_tau: float = 0.0
    contrast: float = 1.0

    def __post_init__(self):
        if self.scheme not in ("ramsey", "parity"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.interrogation_tau < 0:
            raise ValueError("interrogation_tau must be >= 0")
        if not 0.0 <= self.contrast <= 1.0:
            raise ValueError("contrast must lie in [0, 1]")

    def check_timing(self, halo: HaloConfig) -> None:
        if self.scheme == "parity" and self.interrogation_tau < halo.separation_time:
            raise ValueError(
                f"parity readout at {self.interrogation_tau:g} s precedes source separation "
                f"t_sep = {halo.separation_time:g} s")


@dataclass(frozen=True)
class DetectorConfig:
    efficiency_eta: float = 0.1
    fall_distance_d: float = 0.848
    t_star_resolution: float = 3e-6
    xy_resolution: float = 120e-6
    sg_kick_up: float = 0.15  # m/s along +z for m_J = +1
    sg_kick_down: float = 0.0
    lensing_matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if not 0.0 <= self.efficiency_eta <= 1.0:
            raise ValueError("efficiency_eta must lie in [0, 1]")
        if self.t_star_resolution < 0 or self.xy_resolution < 0:
            raise ValueError("resolutions must be non-negative")
        L = np.asarray(self.lensing_matrix, dtype=float).reshape(3, 3)
        if not np.allclose(L, L.T) or np.any(np.linalg.eigvalsh(L) <= 0):
            raise ValueError("lensing_matrix must be symmetric positive definite")
        object.__setattr__(self, "lensing_matrix", L)

    def kick(self, spin) -> np.ndarray:
        spin = np.asarray(spin)
        return np.where(spin == SpinState.UP, self.sg_kick_up, self.sg_kick_down)

    def without_blur(self) -> "DetectorConfig":
        return replace(self, t_star_resolution=0.0, xy_resolution=0.0)


@dataclass
class Shot:
    """Ground-truth atoms of one shot, stored column-wise.

    Atoms ``2i`` and ``2i+1`` form pair ``i``: shared source position and
    opposite CM velocities.  ``spin`` is -1 until a sequence is applied.
    """

    shot_id: int
    pair_id: np.ndarray
    source_position: np.ndarray
    velocity_cm: np.ndarray
    spin: np.ndarray
    truth_phi: np.ndarray

    @property
    def n_atoms(self) -> int:
        return len(self.pair_id)

    @property
    def n_pairs(self) -> int:
        return self.n_atoms // 2

    def pair_directions(self) -> np.ndarray:
        v = self.velocity_cm[0::2]
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def pair_speeds(self) -> np.ndarray:
        return np.linalg.norm(self.velocity_cm[0::2], axis=1)


@dataclass
class Events:
    """Detector-space records: arrival time, impact position and spin label."""

    shot_id: np.ndarray
    t_star: np.ndarray
    x: np.ndarray
    y: np.ndarray
    spin: np.ndarray

    def __len__(self):
        return len(self.t_star)

    @classmethod
    def empty(cls) -> "Events":
        f = np.zeros(0)
        i = np.zeros(0, dtype=np.int64)
        return cls(i, f, f.copy(), f.copy(), np.zeros(0, dtype=np.int8))

    @classmethod
    def concatenate(cls, parts: list["Events"]) -> "Events":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, k) for p in parts])
                     for k in ("shot_id", "t_star", "x", "y", "spin")))

    def select(self, mask) -> "Events":
        return Events(self.shot_id[mask], self.t_star[mask], self.x[mask], self.y[mask], self.spin[mask])


def shot_rng(seed: int, stage: int, tau_index: int, shot_index: int) -> np.random.Generator:
    """Independent generator for one unit of work, reproducible in any order."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(stage, tau_index, shot_index))
    return np.random.default_rng(ss)


def sample_directions(n: int, polar_cap_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform unit vectors with |elevation| <= polar_cap_deg."""
    zmax = np.sin(np.deg2rad(polar_cap_deg))
    z = rng.uniform(-zmax, zmax, n)
    az = rng.uniform(0.0, 2.0 * np.pi, n)
    rho = np.sqrt(1.0 - z * z)
    return np.column_stack([rho * np.cos(az), rho * np.sin(az), z])


def sample_halo(cfg: HaloConfig, rng: np.random.Generator, shot_id: int = 0) -> Shot:
    k = rng.poisson(cfg.mean_pairs_per_shot)
    dirs = sample_directions(k, cfg.polar_cap_deg, rng)
    speed = rng.normal(cfg.v_r, cfg.radial_width_frac * cfg.v_r, k)
    src = rng.normal(0.0, cfg.source_sigma, (k, 3))
    v = dirs * speed[:, None]
    velocity = np.empty((2 * k, 3))
    velocity[0::2] = v
    velocity[1::2] = -v
    return Shot(
        shot_id=shot_id,
        pair_id=np.repeat(np.arange(k, dtype=np.int64), 2),
        source_position=np.repeat(src, 2, axis=0),
        velocity_cm=velocity,
        spin=np.full(2 * k, -1, dtype=np.int8),
        truth_phi=np.zeros(2 * k),
    )


def run_ramsey(shot: Shot, field_model: FieldModel, seq: SequenceConfig, c: PhysicalConstants,
               rng: np.random.Generator) -> Shot:
    """Two pi/2 pulses separated by tau; each atom precesses along its own trajectory."""
    if seq.scheme != "ramsey":
        raise ValueError("run_ramsey requires a ramsey sequence")
    t0 = seq.pulse1_time
    phase = larmor_phase(c, field_model, shot.source_position, shot.velocity_cm, t0, t0 + seq.interrogation_tau)
    p_up = 0.5 * (1.0 + seq.contrast * np.cos(phase))
    spin = (rng.random(shot.n_atoms) < p_up).astype(np.int8)
    return replace(shot, spin=spin, truth_phi=np.asarray(phase, dtype=float).reshape(shot.n_atoms))


# joint outcome order (uu, ud, du, dd) -> spins of (atom +v, atom -v)
_JOINT_FIRST = np.array([1, 1, 0, 0], dtype=np.int8)
_JOINT_SECOND = np.array([1, 0, 1, 0], dtype=np.int8)


def run_parity(shot: Shot, field_model: FieldModel, seq: SequenceConfig, c: PhysicalConstants,
               rng: np.random.Generator) -> Shot:
    """Bell-pair evolution until tau, then a pi/2 readout sampled in the x basis."""
    if seq.scheme != "parity":
        raise ValueError("run_parity requires a parity sequence")
    n = shot.n_pairs
    phi = bell_mixing_array(c, field_model, shot.pair_directions(), shot.pair_speeds(),
                            seq.interrogation_tau, shot.source_position[0::2])
    cdf = np.cumsum(joint_xbasis_distribution(phi), axis=-1)
    u = rng.random(n)
    outcome = np.minimum((u[:, None] >= cdf[:, :3]).sum(axis=1), 3)
    spin = np.empty(2 * n, dtype=np.int8)
    spin[0::2] = _JOINT_FIRST[outcome]
    spin[1::2] = _JOINT_SECOND[outcome]
    return replace(shot, spin=spin, truth_phi=np.repeat(phi, 2))


def free_fall_time(vz, c: PhysicalConstants, fall_distance: float | None = None):
    """Arrival time t* solving d = -vz t + g t^2 / 2 (vz positive upward)."""
    d = c.fall_distance_d if fall_distance is None else fall_distance
    vz = np.asarray(vz, dtype=float)
    return (vz + np.sqrt(vz * vz + 2.0 * c.gravity_g * d)) / c.gravity_g


def detector_velocities(shot: Shot, det: DetectorConfig) -> np.ndarray:
    """Velocities at release as seen by the detector: lensing on m_J=+1, then the SG kick."""
    v = shot.velocity_cm.copy()
    up = shot.spin == SpinState.UP
    if not np.allclose(det.lensing_matrix, np.eye(3)):
        v[up] = v[up] @ det.lensing_matrix.T
    v[:, 2] += det.kick(shot.spin)
    return v


def detect(shot: Shot, det: DetectorConfig, c: PhysicalConstants, rng: np.random.Generator) -> Events:
    keep = rng.random(shot.n_atoms) < det.efficiency_eta
    v = detector_velocities(shot, det)[keep]
    t_star = free_fall_time(v[:, 2], c, det.fall_distance_d)
    x = v[:, 0] * t_star
    y = v[:, 1] * t_star
    n = len(t_star)
    if det.t_star_resolution > 0:
        t_star = t_star + rng.normal(0.0, det.t_star_resolution, n)
    if det.xy_resolution > 0:
        x = x + rng.normal(0.0, det.xy_resolution, n)
        y = y + rng.normal(0.0, det.xy_resolution, n)
    return Events(
        shot_id=np.full(n, shot.shot_id, dtype=np.int64),
        t_star=t_star,
        x=x,
        y=y,
        spin=shot.spin[keep].astype(np.int8),
    )


def simulate_shot(halo: HaloConfig, seq: SequenceConfig, det: DetectorConfig, field_model: FieldModel,
                  c: PhysicalConstants, rng: np.random.Generator, shot_id: int = 0) -> tuple[Shot, Events]:
    """Sample, interrogate and detect one shot."""
    shot = sample_halo(halo, rng, shot_id)
    if seq.scheme == "ramsey":
        shot = run_ramsey(shot, field_model, seq, c, rng)
    else:
        shot = run_parity(shot, field_model, seq, c, rng)
    return shot, detect(shot, det, c, rng)
