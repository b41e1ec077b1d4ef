"""Experiment configuration: YAML schema, validation and hashing.

Every section maps onto a dataclass; unknown keys anywhere are rejected with
the dotted path of the offending entry.  Units follow the rest of the
package (s, m, m/s, gauss).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from dataclasses import field as _field
from pathlib import Path

import numpy as np
import yaml

from .model import GAMMA_CONVENTIONS, FieldModel, PhysicalConstants
from .simulate import DetectorConfig, HaloConfig, SequenceConfig


class ConfigError(ValueError):
    pass


@dataclass
class SequenceSpec:
    scheme: str = "parity"
    pulse1_time: float = 3e-3
    contrast: float = 1.0
    taus: list = _field(default_factory=lambda: [0.8e-3, 1.1e-3, 1.4e-3, 1.7e-3])
    shots_per_tau: int = 200

    def sequence(self, tau: float) -> SequenceConfig:
        return SequenceConfig(self.scheme, self.pulse1_time, float(tau), self.contrast)


@dataclass
class FieldSpec:
    b0: float = 0.532
    gradient: list = _field(default_factory=lambda: [0.0, 0.0, 0.0])
    curvature: list | None = None

    def model(self) -> FieldModel:
        return FieldModel(self.b0, np.asarray(self.gradient, dtype=float),
                          None if self.curvature is None else np.asarray(self.curvature, dtype=float))


@dataclass
class DetectorSpec:
    efficiency_eta: float = 0.1
    fall_distance_d: float = 0.848
    t_star_resolution: float = 3e-6
    xy_resolution: float = 120e-6
    sg_kick_up: float = 0.15
    sg_kick_down: float = 0.0
    lensing_matrix: list = _field(default_factory=lambda: np.eye(3).tolist())

    def detector(self) -> DetectorConfig:
        return DetectorConfig(self.efficiency_eta, self.fall_distance_d, self.t_star_resolution,
                              self.xy_resolution, self.sg_kick_up, self.sg_kick_down,
                              np.asarray(self.lensing_matrix, dtype=float))


@dataclass
class AnalysisSpec:
    alpha_field: float = 0.062 * np.pi
    field_grid_step: float | None = None  # default 2 alpha: non-overlapping cones
    alpha_gradient: float = np.pi / 10
    gradient_grid_step: float | None = None  # default alpha
    polar_cap_deg: float = 60.0
    radial_window: list = _field(default_factory=lambda: [0.94, 1.06])
    n_resamples: int = 1000
    min_count: int = 10
    field_prior_window: list = _field(default_factory=lambda: [0.3, 0.8])
    gradient_bound: float | None = None  # G/m, validates the parity tau grid against wrapping
    gradient_scan_max: float | None = None
    fit_lensing: bool = True
    refine_ellipsoid: bool = False
    r0: float | None = None  # m/s, first-approximation halo radius; default halo.v_r
    mode_nbar: float | None = None  # occupancy used to size modes; default halo value


@dataclass
class ResolutionSpec:
    sigma: float = 35.4e-6
    tau_n: float = 0.01
    xi: float = 0.1
    w: float = 0.03
    T: float | None = None  # default: stationary fall time
    S: float | None = None  # default: v0 T
    n_samples: int = 4_000_000


@dataclass
class BoundsSpec:
    etas: list = _field(default_factory=lambda: [0.05, 0.1, 0.2, 0.3, 0.5, 0.7071067811865476, 0.8, 1.0])
    n_atoms: int = 2


@dataclass
class ExperimentConfig:
    seed: int = 0
    gamma_convention: str = "angular"
    halo: HaloConfig = _field(default_factory=HaloConfig)
    sequence: SequenceSpec = _field(default_factory=SequenceSpec)
    detector: DetectorSpec = _field(default_factory=DetectorSpec)
    field: FieldSpec = _field(default_factory=FieldSpec)
    analysis: AnalysisSpec = _field(default_factory=AnalysisSpec)
    resolution: ResolutionSpec = _field(default_factory=ResolutionSpec)
    bounds: BoundsSpec = _field(default_factory=BoundsSpec)

    def constants(self) -> PhysicalConstants:
        return PhysicalConstants.from_convention(self.gamma_convention,
                                                 fall_distance_d=self.detector.fall_distance_d)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _coerce(default, value, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(default, value, path):
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{path}: null not allowed")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float) or default is None and isinstance(value, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, list) or default is None:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return value
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks beyond what the dataclasses enforce themselves."""
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed: must be an unsigned 64-bit integer")
    if cfg.gamma_convention not in GAMMA_CONVENTIONS:
        raise ConfigError(f"gamma_convention: one of {sorted(GAMMA_CONVENTIONS)}")
    seq = cfg.sequence
    if cfg.sequence.scheme not in ("ramsey", "parity"):
        raise ConfigError("sequence.scheme: 'ramsey' or 'parity'")
    try:
        taus = np.asarray(seq.taus, dtype=float)
        np.asarray(cfg.field.gradient, dtype=float)
        np.asarray(cfg.detector.lensing_matrix, dtype=float).reshape(3, 3)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"non-numeric or mis-shaped entry: {exc}") from exc
    if taus.ndim != 1 or len(taus) == 0 or np.any(taus < 0) or np.any(np.diff(taus) <= 0):
        raise ConfigError("sequence.taus: non-empty, non-negative, strictly increasing")
    if seq.shots_per_tau < 1:
        raise ConfigError("sequence.shots_per_tau: must be >= 1")
    try:
        for t in taus:
            seq.sequence(t).check_timing(cfg.halo)
        cfg.field.model()
        cfg.detector.detector()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if len(cfg.field.gradient) != 3:
        raise ConfigError("field.gradient: 3 components")
    a = cfg.analysis
    lo, hi = a.radial_window if len(a.radial_window) == 2 else (np.nan, np.nan)
    if not 0 <= lo < hi:
        raise ConfigError("analysis.radial_window: [lo, hi] with 0 <= lo < hi")
    for name in ("alpha_field", "alpha_gradient"):
        if not 0 < getattr(a, name) <= np.pi:
            raise ConfigError(f"analysis.{name}: must lie in (0, pi]")
    if not 0 <= a.polar_cap_deg < 90:
        raise ConfigError("analysis.polar_cap_deg: must lie in [0, 90)")
    if a.n_resamples != 0 and a.n_resamples < 100:
        raise ConfigError("analysis.n_resamples: 0 (off) or >= 100")
    if len(a.field_prior_window) != 2 or not 0 <= a.field_prior_window[0] < a.field_prior_window[1]:
        raise ConfigError("analysis.field_prior_window: [lo, hi] gauss with 0 <= lo < hi")
    if a.gradient_bound is not None and seq.scheme == "parity":
        from .estimate import validate_parity_grid

        try:
            validate_parity_grid(taus, cfg.constants().gamma, cfg.halo.v_r, a.gradient_bound)
        except ValueError as exc:
            raise ConfigError(f"sequence.taus: {exc}") from exc
    r = cfg.resolution
    if not (r.sigma > 0 and 0 <= r.tau_n < 1 and r.xi > 0 and r.w > 0 and r.n_samples >= 1000):
        raise ConfigError("resolution: need sigma > 0, 0 <= tau_n < 1, xi > 0, w > 0, n_samples >= 1000")
    b = cfg.bounds
    if not b.etas or any(not 0 < e <= 1 for e in b.etas) or b.n_atoms < 1:
        raise ConfigError("bounds: etas in (0, 1], n_atoms >= 1")


def load_config(path) -> ExperimentConfig:
    """Read and validate a YAML config; OSError propagates for missing files."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(data or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
