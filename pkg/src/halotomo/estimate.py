"""Per-bin Ramsey and parity fits, angular field maps and gradient recovery."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .correlate import (
    BinGrid,
    ModeGrid,
    bootstrap_weights,
    cone_membership,
    cone_modes,
    correlation_record,
    mode_count_table,
    pair_moments,
)
from .model import SpinState
from .reconstruct import HaloCloud


class FitError(RuntimeError):
    pass


@dataclass
class RamseyFit:
    b: float
    contrast: float
    b_stderr: float
    contrast_stderr: float
    chi2: float
    ndof: int
    flags: list = field(default_factory=list)
    candidates: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flags


def ramsey_periodogram(taus, P, stderr, gamma, b_grid):
    """Least-squares power of P = C cos(gamma B tau) for each trial field."""
    w = 1.0 / np.asarray(stderr, dtype=float) ** 2
    cosm = np.cos(gamma * np.outer(b_grid, taus))
    proj = cosm @ (w * P)
    norm = (cosm**2) @ w
    return proj**2 / norm, proj / norm


def _local_maxima(y):
    idx = np.flatnonzero((y[1:-1] >= y[:-2]) & (y[1:-1] > y[2:])) + 1
    if len(y) > 1:
        if y[0] > y[1]:
            idx = np.r_[0, idx]
        if y[-1] > y[-2]:
            idx = np.r_[idx, len(y) - 1]
    return idx


def fit_ramsey(taus, P, stderr, gamma: float, b_window: tuple[float, float],
               alias_ratio: float = 0.9, min_significance: float = 3.0) -> RamseyFit:
    """Fit P(tau) = C cos(gamma B tau), seeded from a periodogram over ``b_window``.

    Flags: ``no_oscillation`` when C is not ``min_significance`` standard
    errors above zero, ``ambiguous`` when a separate periodogram peak reaches
    ``alias_ratio`` of the best one, ``outside_window`` when the refined B
    leaves the prior window.
    """
    taus = np.asarray(taus, dtype=float)
    P = np.asarray(P, dtype=float)
    stderr = np.asarray(stderr, dtype=float)
    if len(taus) < 4:
        raise ValueError("need at least 4 points for a Ramsey fit")
    if np.any(np.diff(taus) <= 0):
        raise ValueError("taus must be strictly increasing")
    lo, hi = b_window
    if not 0 <= lo < hi:
        raise ValueError("bad field prior window")
    if gamma * hi * np.diff(taus).min() >= np.pi:
        raise ValueError("prior window extends beyond the Nyquist limit of the tau grid")

    span = taus[-1] - taus[0]
    n_scan = int(max(2001, 40 * gamma * (hi - lo) * span / (2 * np.pi)))
    b_grid = np.linspace(lo, hi, n_scan)
    power, amp = ramsey_periodogram(taus, P, stderr, gamma, b_grid)
    flags = []
    peaks = _local_maxima(power)
    if len(peaks) == 0 or power.max() <= 0:
        return RamseyFit(np.nan, 0.0, np.inf, np.inf, np.nan, len(taus) - 2, ["no_oscillation"])
    peaks = peaks[np.argsort(power[peaks])[::-1]]
    best = peaks[0]
    width = 2 * np.pi / (gamma * span)
    candidates = [float(b_grid[best])]
    for p in peaks[1:]:
        if power[p] >= alias_ratio * power[best] and abs(b_grid[p] - b_grid[best]) > 0.5 * width:
            candidates.append(float(b_grid[p]))
    if len(candidates) > 1:
        flags.append("ambiguous")

    def model(t, b, c):
        return c * np.cos(gamma * b * t)

    try:
        popt, pcov = optimize.curve_fit(model, taus, P, p0=[b_grid[best], amp[best]], sigma=stderr,
                                        absolute_sigma=True, maxfev=10000)
        perr = np.sqrt(np.diag(pcov))
    except (RuntimeError, optimize.OptimizeWarning):
        return RamseyFit(float(b_grid[best]), float(amp[best]), np.inf, np.inf, np.nan, len(taus) - 2,
                         flags + ["fit_failed"], candidates)
    b, cval = popt
    chi2 = float(np.sum(((P - model(taus, b, cval)) / stderr) ** 2))
    if not np.all(np.isfinite(perr)) or cval <= 0 or cval < min_significance * perr[1]:
        flags.append("no_oscillation")
    if not lo <= b <= hi:
        flags.append("outside_window")
    return RamseyFit(float(b), float(cval), float(perr[0]), float(perr[1]), chi2, len(taus) - 2, flags, candidates)


@dataclass
class GradientFit:
    db_dr_mag: float
    stderr: float
    chi2: float
    flags: list = field(default_factory=list)
    candidates: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flags


def wrap_limit(taus, gamma: float, v_r: float) -> float:
    """Largest |dB/dr| whose mixing angle stays within pi/2 over the tau grid."""
    return np.pi / (gamma * v_r * np.max(taus) ** 2)


def validate_parity_grid(taus, gamma: float, v_r: float, gradient_bound: float) -> None:
    if gradient_bound > wrap_limit(taus, gamma, v_r):
        raise ValueError(
            f"tau grid up to {np.max(taus):g} s wraps the mixing angle beyond pi/2 for "
            f"|dB/dr| <= {gradient_bound:g} G/m (limit {wrap_limit(taus, gamma, v_r):g} G/m)")


def fit_gradient_parity(taus, parity, stderr, gamma: float, v_r: float, m_max: float | None = None,
                        n_scan: int = 4000) -> GradientFit:
    """Single-parameter fit parity(tau) = cos(gamma v_r m tau^2), m >= 0.

    The global minimum of chi^2 is located on a dense scan over [0, m_max]
    (default twice the wrap limit) and polished.  The standard error is the
    half-width of the chi^2 <= min + 1 interval.  Every other local minimum
    within chi^2 + 4 is listed in ``candidates``; a best value past the wrap
    limit raises the ``wrap_ambiguity`` flag.
    """
    taus = np.asarray(taus, dtype=float)
    parity = np.asarray(parity, dtype=float)
    stderr = np.asarray(stderr, dtype=float)
    if len(taus) < 3:
        raise ValueError("need at least 3 points for a parity fit")
    a = gamma * v_r
    m_wrap = wrap_limit(taus, gamma, v_r)
    m_max = 2 * m_wrap if m_max is None else m_max
    w = 1.0 / stderr**2

    def chi2(m):
        return np.sum(w * (parity - np.cos(a * np.multiply.outer(m, taus**2))) ** 2, axis=-1)

    grid = np.linspace(0.0, m_max, n_scan)
    c2 = chi2(grid)
    h = grid[1] - grid[0]
    minima = []
    for i in _local_maxima(-c2):
        lo_, hi_ = max(0.0, grid[i] - h), min(m_max, grid[i] + h)
        res = optimize.minimize_scalar(chi2, bounds=(lo_, hi_), method="bounded",
                                       options={"xatol": 1e-10 * max(m_max, 1e-30)})
        minima.append((float(res.fun), float(res.x)))
    minima.sort()
    best_c2, best_m = minima[0]

    def crossing(direction):
        i = int(round(best_m / h))
        f = lambda m: chi2(m) - best_c2 - 1.0  # noqa: E731
        j = i
        while 0 <= j + direction < n_scan:
            j += direction
            if f(grid[j]) > 0:
                a_, b_ = sorted((best_m, grid[j]))
                return optimize.brentq(f, a_, b_, xtol=1e-12 * max(m_max, 1e-30))
        return None

    up = crossing(+1)
    down = crossing(-1)
    if up is None:
        se = np.inf
    elif down is None:
        se = up - best_m if best_m > h else up
    else:
        se = 0.5 * (up - down)
    flags = []
    if best_m > m_wrap:
        flags.append("wrap_ambiguity")
    if not np.isfinite(se):
        flags.append("unconstrained")
    cands = [m for c, m in minima if c <= best_c2 + 4.0]
    return GradientFit(best_m, float(se), float(best_c2), flags, cands)


@dataclass
class AngularMap:
    """Per-bin estimates over a BinGrid (field in G or |dB/dr| in G/m)."""

    grid: BinGrid
    value: np.ndarray
    stderr: np.ndarray
    flags: list
    n_atoms: np.ndarray
    n_shots: int
    quantity: str = "B"
    unit: str = "G"
    details: list = field(default_factory=list)

    @property
    def theta(self):
        return self.grid.theta

    @property
    def phi(self):
        return self.grid.phi

    def valid(self, fatal=("no_oscillation", "fit_failed", "low_statistics", "wrap_ambiguity",
                          "unconstrained", "insufficient_points", "excluded", "outside_window",
                          "ambiguous")) -> np.ndarray:
        ok = np.isfinite(self.value) & np.isfinite(self.stderr)
        return ok & np.array([not any(f in fatal for f in fl) for fl in self.flags], dtype=bool)


def _series_by_bin(clouds_by_tau, grid: BinGrid):
    taus = np.array([t for t, _ in clouds_by_tau], dtype=float)
    order = np.argsort(taus)
    up = np.zeros((len(grid), len(taus)))
    down = np.zeros((len(grid), len(taus)))
    n_shots = 0
    for col, k in enumerate(order):
        cloud = clouds_by_tau[k][1]
        n_shots += len(np.unique(cloud.shot_id))
        member = cone_membership(cloud, grid.axes, grid.alpha, grid.radial_window)
        up[:, col] = member[cloud.spin == SpinState.UP].sum(axis=0)
        down[:, col] = member[cloud.spin == SpinState.DOWN].sum(axis=0)
    return taus[order], up, down, n_shots


def polarisation_series(n_up, n_down):
    """Polarisation and its binomial standard error (Laplace-regularised near |P| = 1)."""
    n = n_up + n_down
    with np.errstate(invalid="ignore", divide="ignore"):
        P = (n_up - n_down) / n
        p = (n_up + 1.0) / (n + 2.0)
        se = np.sqrt(4.0 * p * (1.0 - p) / n)
    return P, se


def map_field(clouds_by_tau, grid: BinGrid, gamma: float, b_window, min_count: int = 10) -> AngularMap:
    """Ramsey tomography: polarisation series per cone, then fit_ramsey per bin.

    ``clouds_by_tau`` is a sequence of ``(tau, HaloCloud)``.
    """
    taus, up, down, n_shots = _series_by_bin(clouds_by_tau, grid)
    nb = len(grid)
    value = np.full(nb, np.nan)
    se = np.full(nb, np.nan)
    flags, details = [], []
    for b in range(nb):
        fl = []
        if abs(grid.phi[b]) > grid.phi_max + 1e-12:
            fl.append("excluded")
        n = up[b] + down[b]
        ok = n > 0
        if (n < min_count).any():
            fl.append("low_statistics")
        if ok.sum() < 4:
            flags.append(fl + ["insufficient_points"])
            details.append(None)
            continue
        P, sP = polarisation_series(up[b, ok], down[b, ok])
        fit = fit_ramsey(taus[ok], P, sP, gamma, b_window)
        value[b], se[b] = fit.b, fit.b_stderr
        flags.append(fl + fit.flags)
        details.append({"contrast": fit.contrast, "contrast_stderr": fit.contrast_stderr, "chi2": fit.chi2,
                        "ndof": fit.ndof, "taus": taus[ok].tolist(), "P": P.tolist(), "P_stderr": sP.tolist()})
    return AngularMap(grid, value, se, flags, (up + down).sum(axis=1), n_shots, "B", "G", details)


def map_gradient(clouds_by_tau, grid: BinGrid, modes: ModeGrid, gamma: float, v_r: float,
                 n_resamples: int = 1000, rng: np.random.Generator | None = None,
                 m_max: float | None = None, min_count: int = 10) -> AngularMap:
    """Parity gradiometry: per double cone and tau compute (E_xx, G) -> parity with
    bootstrap errors, then fit |dB/dr| per bin.

    Antipodal bins share one double cone and therefore one estimate.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    taus = np.array([t for t, _ in clouds_by_tau], dtype=float)
    order = np.argsort(taus)
    nb = len(grid)
    anti = grid.antipode()
    rep = np.array([min(b, anti[b]) if anti[b] >= 0 else b for b in range(nb)])
    uniq = np.unique(rep)
    plus = {b: cone_modes(modes, grid.axes[b], grid.alpha) for b in uniq}
    parity = np.full((nb, len(taus)), np.nan)
    parity_se = np.full((nb, len(taus)), np.nan)
    records = [[None] * len(taus) for _ in range(nb)]
    low = np.zeros(nb, dtype=bool)
    n_atoms = np.zeros(nb)
    n_shots = 0
    for col, k in enumerate(order):
        cloud = clouds_by_tau[k][1]
        table = mode_count_table(cloud, modes, grid.radial_window)
        n_shots += table.n_shots
        W = bootstrap_weights(table.n_shots, n_resamples, rng) if n_resamples else None
        for b in uniq:
            m = pair_moments(table, plus[b], modes.antipode(plus[b]))
            rec = correlation_record(m, W, min_count=min_count)
            for bb in np.flatnonzero(rep == b):
                records[bb][col] = rec
                parity[bb, col] = rec.parity
                parity_se[bb, col] = rec.stderr.get("parity", np.inf)
                low[bb] |= "low_statistics" in rec.flags
                n_atoms[bb] += sum(rec.counts[x] for x in ("up_plus", "down_plus", "up_minus", "down_minus"))
    value = np.full(nb, np.nan)
    se = np.full(nb, np.nan)
    flags, details = [], []
    fits = {}
    for b in range(nb):
        fl = ["low_statistics"] if low[b] else []
        ok = np.isfinite(parity[b]) & np.isfinite(parity_se[b]) & (parity_se[b] > 0)
        if ok.sum() < 3:
            flags.append(fl + ["insufficient_points"])
            details.append(None)
            continue
        if rep[b] not in fits:
            fits[rep[b]] = fit_gradient_parity(taus[order][ok], parity[b, ok], parity_se[b, ok], gamma, v_r,
                                               m_max=m_max)
        fit = fits[rep[b]]
        value[b], se[b] = fit.db_dr_mag, fit.stderr
        flags.append(fl + fit.flags)
        details.append({
            "taus": taus[order].tolist(), "parity": parity[b].tolist(), "parity_stderr": parity_se[b].tolist(),
            "G": [r.G if r else np.nan for r in records[b]], "E_xx": [r.E_xx if r else np.nan for r in records[b]],
            "E_direct": [r.E_direct if r else np.nan for r in records[b]],
            "G_stderr": [r.stderr.get("G", np.nan) if r else np.nan for r in records[b]],
            "E_xx_stderr": [r.stderr.get("E_xx", np.nan) if r else np.nan for r in records[b]],
            "E_direct_stderr": [r.stderr.get("E_direct", np.nan) if r else np.nan for r in records[b]],
            "candidates": fit.candidates, "chi2": fit.chi2,
        })
    return AngularMap(grid, value, se, flags, n_atoms, n_shots, "dB/dr", "G/m", details)


@dataclass
class GradientVectorFit:
    gradient: np.ndarray
    stderr: np.ndarray
    magnitude: float
    magnitude_stderr: float
    axis: np.ndarray
    chi2: float
    ndof: int
    n_bins: int
    flags: list = field(default_factory=list)

    @property
    def p_value(self) -> float:
        return float(stats.chi2.sf(self.chi2, self.ndof)) if self.ndof > 0 else np.nan


def _octant(q):
    return tuple(np.where(np.asarray(q) >= 0, 1, -1))


def fit_gradient_vector(gmap: AngularMap, min_bins: int = 6, p_threshold: float = 1e-3) -> GradientVectorFit:
    """Weighted least squares of |g . q_b| = m_b over the valid bins.

    Multi-start over the four sign patterns of the octant diagonals and the
    coordinate axes.  The global sign of g is not observable; the returned
    vector has its largest component positive.  ``inconsistent`` is flagged
    when the chi^2 p-value falls below ``p_threshold``.
    """
    ok = gmap.valid()
    q = gmap.grid.axes[ok]
    m = gmap.value[ok]
    s = gmap.stderr[ok]
    if ok.sum() < min_bins:
        raise FitError(f"need at least {min_bins} well-fit bins, got {int(ok.sum())}")
    if len({_octant(x) for x in q}) < 2:
        raise FitError("bins cover fewer than two angular octants")
    s = np.maximum(s, 1e-12 * max(np.abs(m).max(), 1e-300))

    def resid(g):
        return (np.abs(q @ g) - m) / s

    scale = float(np.max(m)) if np.max(m) > 0 else 1.0
    starts = [np.array(v, float) / np.linalg.norm(v) * scale
              for v in ([1, 1, 1], [1, 1, -1], [1, -1, 1], [-1, 1, 1], [1, 0, 0], [0, 1, 0], [0, 0, 1])]
    starts.append(q[np.argmax(m)] * scale)
    best = None
    for x0 in starts:
        sol = optimize.least_squares(resid, x0, method="lm", xtol=1e-14, ftol=1e-14)
        if best is None or sol.cost < best.cost:
            best = sol
    g = best.x
    if g[np.argmax(np.abs(g))] < 0:
        g = -g
    J = best.jac
    try:
        cov = np.linalg.inv(J.T @ J)
        err = np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError:
        cov = np.full((3, 3), np.inf)
        err = np.full(3, np.inf)
    mag = float(np.linalg.norm(g))
    axis = g / mag if mag > 0 else np.full(3, np.nan)
    mag_se = float(np.sqrt(axis @ cov @ axis)) if mag > 0 else np.inf
    chi2 = float(2 * best.cost)
    ndof = int(ok.sum() - 3)
    out = GradientVectorFit(g, err, mag, mag_se, axis, chi2, ndof, int(ok.sum()))
    if ndof > 0 and out.p_value < p_threshold:
        out.flags.append("inconsistent")
    return out


def ramsey_differential(field_map: AngularMap, index: int, diameter: float) -> tuple[float, float]:
    """Signed dB/dr along bin ``index`` from the field difference to its antipode."""
    anti = field_map.grid.antipode()[index]
    if anti < 0:
        raise KeyError("bin has no antipode in the grid")
    b1, b2 = field_map.value[index], field_map.value[anti]
    s1, s2 = field_map.stderr[index], field_map.stderr[anti]
    if not (np.isfinite(b1) and np.isfinite(b2)):
        raise FitError("antipodal bins were not both fitted")
    return float((b1 - b2) / diameter), float(np.hypot(s1, s2) / diameter)


@dataclass
class HistogramStats:
    mean: float
    std: float
    mean_stderr: float
    counts: np.ndarray
    edges: np.ndarray
    n: int


def histogram_stats(values, bins: int | str = "auto", min_values: int = 10) -> HistogramStats:
    """Histogram plus maximum-likelihood Gaussian (mean, population std)."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if len(v) < min_values:
        raise ValueError(f"need at least {min_values} valid bins, got {len(v)}")
    mu, sd = stats.norm.fit(v)
    counts, edges = np.histogram(v, bins=bins)
    return HistogramStats(float(mu), float(sd), float(sd / np.sqrt(len(v))), counts, edges, len(v))
