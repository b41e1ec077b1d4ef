"""Detector events back to normalised momentum-space halo clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.spatial.transform import Rotation

from .model import UNCLASSIFIED, PhysicalConstants, SpinState
from .simulate import DetectorConfig, Events


class ClassificationError(RuntimeError):
    """Stern-Gerlach bands overlap too much to assign spins."""


class DegenerateFitError(RuntimeError):
    """The fitted quadric is not an ellipsoid."""


def invert_tof(events: Events, det: DetectorConfig, c: PhysicalConstants) -> np.ndarray:
    """Release velocities (n, 3) from arrival time and impact position.

    Source offsets are neglected: v_x = x/t*, v_y = y/t*, v_z = g t*/2 - d/t*.
    """
    t = np.asarray(events.t_star, dtype=float)
    if np.any(t <= 0):
        raise ValueError("arrival times must be positive")
    vz = 0.5 * c.gravity_g * t - det.fall_distance_d / t
    return np.column_stack([np.asarray(events.x) / t, np.asarray(events.y) / t, vz])


def vz_first_order(t_star, c: PhysicalConstants):
    """First-order v_z = g T* tau_n and its relative error against the exact inversion.

    Returns ``(approx, rel_error)``; the error is nan where the exact value is 0.
    """
    t_star = np.asarray(t_star, dtype=float)
    T = c.t_star_stationary
    tau_n = (t_star - T) / T
    approx = c.gravity_g * T * tau_n
    exact = 0.5 * c.gravity_g * t_star - c.fall_distance_d / t_star
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(exact != 0, np.abs(approx - exact) / np.abs(exact), np.nan)
    return approx, rel


@dataclass
class Classification:
    spin: np.ndarray
    ambiguous_fraction: float
    accuracy: float | None = None


def classify_spin(velocities: np.ndarray, det: DetectorConfig, halo_radius: float,
                  max_ambiguous: float = 1e-3, truth=None) -> Classification:
    """Assign spins from the nearest SG band centre along z.

    An atom is ambiguous when it lies within ``halo_radius`` of both band
    centres; a fraction above ``max_ambiguous`` raises ClassificationError.
    """
    vz = np.asarray(velocities)[:, 2]
    du = np.abs(vz - det.sg_kick_up)
    dd = np.abs(vz - det.sg_kick_down)
    spin = np.where(du < dd, SpinState.UP, SpinState.DOWN).astype(np.int8)
    ambiguous = (du <= halo_radius) & (dd <= halo_radius)
    frac = float(ambiguous.mean()) if len(vz) else 0.0
    if frac > max_ambiguous:
        raise ClassificationError(
            f"{100 * frac:.2f}% of atoms fall in overlapping SG bands "
            f"(kick separation {abs(det.sg_kick_up - det.sg_kick_down):g} m/s)")
    acc = None
    if truth is not None and len(vz):
        acc = float(np.mean(spin == np.asarray(truth)))
    return Classification(spin=spin, ambiguous_fraction=frac, accuracy=acc)


@dataclass(frozen=True)
class EllipsoidFit:
    center: np.ndarray
    semi_axes: np.ndarray
    rotation: np.ndarray  # columns are the principal directions
    n_points: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.semi_axes) <= 0):
            raise DegenerateFitError("semi-axes must be positive")
        R = np.asarray(self.rotation)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")

    @property
    def shape_matrix(self) -> np.ndarray:
        """M with (x - c)^T M (x - c) = 1 on the surface."""
        R = self.rotation
        return R @ np.diag(1.0 / self.semi_axes**2) @ R.T

    @classmethod
    def sphere(cls, radius: float, center=(0.0, 0.0, 0.0)) -> "EllipsoidFit":
        return cls(np.asarray(center, dtype=float), np.full(3, float(radius)), np.eye(3))


def _radial_prefilter(points, r0, window):
    center = np.median(points, axis=0)
    r = np.linalg.norm(points - center, axis=1)
    if r0 is None:
        r0 = float(np.median(r))
    keep = (r > window[0] * r0) & (r < window[1] * r0)
    return points[keep], r0


def _algebraic_fit(p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # x^T A x + 2 b^T x = 1, on shifted/scaled coordinates for conditioning
    shift = p.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum((p - shift) ** 2, axis=1)))
    q = (p - shift) / scale
    x, y, z = q.T
    D = np.column_stack([x * x, y * y, z * z, 2 * x * y, 2 * x * z, 2 * y * z, 2 * x, 2 * y, 2 * z])
    coef, *_ = np.linalg.lstsq(D, np.ones(len(q)), rcond=None)
    a, b_, c_, d, e, f, g, h, i = coef
    A = np.array([[a, d, e], [d, b_, f], [e, f, c_]])
    bvec = np.array([g, h, i])
    try:
        center_q = -np.linalg.solve(A, bvec)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFitError("singular quadric") from exc
    k = 1.0 + center_q @ A @ center_q
    M = A / k
    evals, evecs = np.linalg.eigh(M)
    if np.any(evals <= 0) or not np.isfinite(k):
        raise DegenerateFitError(f"quadric is not an ellipsoid (eigenvalues {evals})")
    axes = scale / np.sqrt(evals)
    center = shift + scale * center_q
    if np.linalg.det(evecs) < 0:
        evecs[:, 2] *= -1
    return center, axes, evecs


def _geometric_refine(p, center, axes, R):
    rv0 = Rotation.from_matrix(R).as_rotvec()
    x0 = np.concatenate([center, np.log(axes), rv0])

    def resid(x):
        Rm = Rotation.from_rotvec(x[6:]).as_matrix()
        local = (p - x[:3]) @ Rm / np.exp(x[3:6])
        return np.linalg.norm(local, axis=1) - 1.0

    sol = optimize.least_squares(resid, x0, method="lm")
    Rm = Rotation.from_rotvec(sol.x[6:]).as_matrix()
    return sol.x[:3], np.exp(sol.x[3:6]), Rm


def fit_ellipsoid(points, r0: float | None = None, radial_window=(0.6, 1.2),
                  refine: bool = False) -> EllipsoidFit:
    """Algebraic least-squares ellipsoid through a (noisy) shell of points.

    Points are first kept within ``radial_window`` times ``r0`` of the median
    centre (``r0`` defaults to the median radius).  ``refine`` adds a
    geometric least-squares pass started from the algebraic solution.
    """
    points = np.asarray(points, dtype=float)
    p, _ = _radial_prefilter(points, r0, radial_window)
    if len(p) < 9:
        raise DegenerateFitError(f"need at least 9 points after the radial prefilter, got {len(p)}")
    center, axes, R = _algebraic_fit(p)
    if refine:
        center, axes, R = _geometric_refine(p, center, axes, R)
    return EllipsoidFit(center=center, semi_axes=axes, rotation=R, n_points=len(p))


@dataclass
class HaloCloud:
    """Unit-sphere momentum cloud; one row per detected atom."""

    shot_id: np.ndarray
    k_hat: np.ndarray
    k_norm: np.ndarray
    spin: np.ndarray

    def __len__(self):
        return len(self.k_norm)

    @property
    def k(self) -> np.ndarray:
        return self.k_hat * self.k_norm[:, None]

    @property
    def shots(self) -> np.ndarray:
        return np.unique(self.shot_id)

    def select(self, mask) -> "HaloCloud":
        return HaloCloud(self.shot_id[mask], self.k_hat[mask], self.k_norm[mask], self.spin[mask])

    @classmethod
    def concatenate(cls, parts: list["HaloCloud"]) -> "HaloCloud":
        parts = [p for p in parts if p is not None]
        if not parts:
            return cls(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int8))
        return cls(np.concatenate([p.shot_id for p in parts]), np.concatenate([p.k_hat for p in parts]),
                   np.concatenate([p.k_norm for p in parts]), np.concatenate([p.spin for p in parts]))

    @classmethod
    def from_vectors(cls, k, spin, shot_id) -> "HaloCloud":
        k = np.asarray(k, dtype=float)
        norm = np.linalg.norm(k, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            k_hat = k / norm[:, None]
        return cls(np.asarray(shot_id, dtype=np.int64), k_hat, norm, np.asarray(spin, dtype=np.int8))


def normalize_halo(points, fit: EllipsoidFit, spin=None, shot_id=None, rescale_mean: bool = True,
                   mean_window=(0.6, 1.2)) -> HaloCloud:
    """Map the fitted ellipsoid onto the unit sphere.

    With ``rescale_mean`` the radii are divided by their mean over atoms
    inside ``mean_window`` so the halo's mean radius is exactly 1.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    R = fit.rotation
    local = (points - fit.center) @ R / fit.semi_axes
    k = local @ R.T
    if rescale_mean and n:
        r = np.linalg.norm(k, axis=1)
        sel = (r > mean_window[0]) & (r < mean_window[1])
        if np.any(sel):
            k = k / r[sel].mean()
    spin = np.full(n, UNCLASSIFIED, dtype=np.int8) if spin is None else spin
    shot_id = np.zeros(n, dtype=np.int64) if shot_id is None else shot_id
    return HaloCloud.from_vectors(k, spin, shot_id)


def elevation_azimuth(k_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k_hat = np.asarray(k_hat)
    elev = np.arcsin(np.clip(k_hat[:, 2], -1.0, 1.0))
    az = np.mod(np.arctan2(k_hat[:, 1], k_hat[:, 0]), 2.0 * np.pi)
    return elev, az


@dataclass
class HaloStatistics:
    mean_radius: float
    radial_rms_width: float
    radial_hist: tuple[np.ndarray, np.ndarray]
    azimuthal_hist: tuple[np.ndarray, np.ndarray]
    polar_hist: tuple[np.ndarray, np.ndarray]
    azimuthal_chi2_pvalue: float
    n_atoms: int

    def as_dict(self) -> dict:
        return {
            "n_atoms": self.n_atoms,
            "mean_radius": self.mean_radius,
            "radial_rms_width": self.radial_rms_width,
            "azimuthal_chi2_pvalue": self.azimuthal_chi2_pvalue,
            "radial_hist": {"edges": self.radial_hist[1].tolist(), "counts": self.radial_hist[0].tolist()},
            "azimuthal_hist": {"edges": self.azimuthal_hist[1].tolist(), "counts": self.azimuthal_hist[0].tolist()},
            "polar_hist": {"edges": self.polar_hist[1].tolist(), "counts": self.polar_hist[0].tolist()},
        }


def halo_statistics(cloud: HaloCloud, radial_window=(0.8, 1.2), n_radial=40, n_azimuthal=36,
                    n_polar=36) -> HaloStatistics:
    """Radial width and angular histograms of a normalised cloud.

    The rms width is the standard deviation of k_norm over atoms inside
    ``radial_window``, divided by their mean radius.
    """
    from scipy import stats

    if len(cloud) == 0:
        raise ValueError("empty cloud")
    r = cloud.k_norm
    sel = (r > radial_window[0]) & (r < radial_window[1])
    if not np.any(sel):
        raise ValueError("no atoms inside the radial window")
    mean_r = float(r[sel].mean())
    width = float(r[sel].std() / mean_r)
    elev, az = elevation_azimuth(cloud.k_hat[sel])
    rh = np.histogram(r, bins=n_radial, range=radial_window)
    ah = np.histogram(az, bins=n_azimuthal, range=(0.0, 2.0 * np.pi))
    ph = np.histogram(elev, bins=n_polar, range=(-np.pi / 2, np.pi / 2))
    pval = float(stats.chisquare(ah[0]).pvalue)
    return HaloStatistics(mean_r, width, rh, ah, ph, pval, int(sel.sum()))


def reconstruct_cloud(events: Events, det: DetectorConfig, c: PhysicalConstants, halo_radius: float,
                      fit_lensing: bool = True, classify: bool = True, refine: bool = False,
                      r0: float | None = None, max_ambiguous: float = 1e-3) -> tuple[HaloCloud, dict]:
    """Full event-to-cloud chain: TOF inversion, spin bands, ellipsoid normalisation.

    ``halo_radius`` is the expected CM speed of the shell (m/s); it sets the
    SG band half-width and the default first-approximation radius.  Returns
    the cloud and per-spin diagnostics.
    """
    v = invert_tof(events, det, c)
    if classify:
        cls = classify_spin(v, det, halo_radius * 1.15, max_ambiguous=max_ambiguous, truth=events.spin)
        spin = cls.spin
        diag = {"ambiguous_fraction": cls.ambiguous_fraction, "classification_accuracy": cls.accuracy}
    else:
        spin = np.asarray(events.spin, dtype=np.int8)
        diag = {}
    parts = []
    for s in (SpinState.DOWN, SpinState.UP):
        sel = spin == s
        if not np.any(sel):
            continue
        vs = v[sel].copy()
        vs[:, 2] -= det.sg_kick_up if s == SpinState.UP else det.sg_kick_down
        if fit_lensing:
            fit = fit_ellipsoid(vs, r0=halo_radius if r0 is None else r0, refine=refine)
        else:
            fit = EllipsoidFit.sphere(halo_radius)
        diag[f"fit_{s.name.lower()}"] = {
            "center": fit.center.tolist(), "semi_axes": fit.semi_axes.tolist(), "n_points": fit.n_points}
        cloud = normalize_halo(vs, fit, spin=spin[sel], shot_id=np.asarray(events.shot_id)[sel])
        parts.append((np.flatnonzero(sel), cloud))
    # restore event order so the output is independent of the spin split
    order = np.concatenate([idx for idx, _ in parts]) if parts else np.zeros(0, dtype=int)
    merged = HaloCloud.concatenate([cl for _, cl in parts])
    inv = np.argsort(order, kind="stable")
    return merged.select(inv), diag


@dataclass(frozen=True)
class ResolutionParams:
    """Source and velocity widths of the one-dimensional resolution model.

    Positions r ~ N(0, sigma^2) and velocities v ~ N(v0, sigma_v^2); s* is the
    position at the interrogation time t*, S the position at detection T.
    """

    sigma: float
    sigma_v: float
    T: float
    t_star_interrogation: float
    v0: float

    def __post_init__(self):
        if not (self.sigma > 0 and self.sigma_v > 0 and self.T > 0 and self.v0 > 0):
            raise ValueError("sigma, sigma_v, T and v0 must be positive")
        if not 0 <= self.t_star_interrogation < self.T:
            raise ValueError("need 0 <= t* < T")

    @classmethod
    def from_dimensionless(cls, sigma: float, T: float, tau_n: float, xi: float, w: float):
        sigma_v = sigma / (xi * T)
        return cls(sigma, sigma_v, T, tau_n * T, sigma_v / w)

    @property
    def tau_n(self) -> float:
        return self.t_star_interrogation / self.T

    @property
    def xi(self) -> float:
        return self.sigma / (self.sigma_v * self.T)

    @property
    def w(self) -> float:
        return self.sigma_v / self.v0


def resolution_moments(p: ResolutionParams, S: float) -> dict:
    """Conditional mean and width of s* given the detected position S, plus far-field limits."""
    tau, xi, w, sig = p.tau_n, p.xi, p.w, p.sigma
    mean = ((tau + xi**2) * S - sig * xi / w * (1 - tau)) / (1 + xi**2)
    width = sig * (1 - tau) / np.sqrt(1 + xi**2)
    return {"mean": float(mean), "width": float(width),
            "far_field": {"mean": float(tau * S), "width": float(sig * (1 - tau))}}


def resolution_monte_carlo(p: ResolutionParams, S: float, n_samples: int = 4_000_000,
                           rng: np.random.Generator | None = None, kernel_frac: float = 0.1,
                           chunk: int = 1_000_000) -> dict:
    """Kernel-conditioned sample mean and width of s* around the detected position S."""
    rng = np.random.default_rng(0) if rng is None else rng
    h = kernel_frac * resolution_moments(p, S)["width"]
    sw = swx = swx2 = sw2 = 0.0
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        r = rng.normal(0.0, p.sigma, n)
        v = rng.normal(p.v0, p.sigma_v, n)
        s_star = r + v * p.t_star_interrogation
        s_fin = r + v * p.T
        wt = np.exp(-0.5 * ((s_fin - S) / h) ** 2)
        sw += wt.sum()
        sw2 += (wt * wt).sum()
        swx += (wt * s_star).sum()
        swx2 += (wt * s_star**2).sum()
        done += n
    mean = swx / sw
    var = swx2 / sw - mean**2
    return {"mean": float(mean), "width": float(np.sqrt(var)), "n_effective": float(sw**2 / sw2)}
