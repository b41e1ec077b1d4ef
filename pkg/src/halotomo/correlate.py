"""Angular binning, back-to-back correlators, parity extraction and bootstrap errors.

Two kinds of angular partition are used:

* :class:`BinGrid` -- equirectangular lattice of (possibly overlapping)
  conical integration volumes; these are the map pixels.
* :class:`ModeGrid` -- equal-area partition of the sphere into momentum
  modes with an exact antipode map.  Localised g2 and E_xx sum over the modes
  whose centres fall inside a cone, i.e. over k in the integration volume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .model import SpinState
from .reconstruct import HaloCloud


@dataclass(frozen=True)
class ConicalBin:
    axis: np.ndarray
    half_angle_alpha: float
    radial_window: tuple[float, float] = (0.94, 1.06)

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=float).reshape(3)
        object.__setattr__(self, "axis", a / np.linalg.norm(a))
        if not 0 < self.half_angle_alpha <= np.pi:
            raise ValueError("half-angle must lie in (0, pi]")
        if not self.radial_window[0] < self.radial_window[1]:
            raise ValueError("radial window must be increasing")


def unit_vector(theta, phi) -> np.ndarray:
    """Axis from azimuth ``theta`` and elevation ``phi`` (radians)."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)], axis=-1)


@dataclass(frozen=True)
class BinGrid:
    """Equirectangular theta x phi lattice of cones with a polar exclusion."""

    theta: np.ndarray
    phi: np.ndarray
    alpha: float
    radial_window: tuple[float, float]
    phi_max: float

    @classmethod
    def equirectangular(cls, alpha: float, step: float, polar_cap_deg: float = 60.0,
                        radial_window=(0.94, 1.06)) -> "BinGrid":
        """Cell-centred lattice covering [0, 2 pi) x [-phi_max, phi_max].

        The number of azimuth cells is forced even so every bin has its
        antipode in the grid.
        """
        phi_max = np.deg2rad(polar_cap_deg)
        n_theta = max(2, int(round(2 * np.pi / step)))
        n_theta += n_theta % 2
        n_phi = max(1, int(round(2 * phi_max / step)))
        th = (np.arange(n_theta) + 0.5) * 2 * np.pi / n_theta
        ph = -phi_max + (np.arange(n_phi) + 0.5) * 2 * phi_max / n_phi
        T, P = np.meshgrid(th, ph, indexing="ij")
        return cls(T.ravel(), P.ravel(), float(alpha), tuple(radial_window), float(phi_max))

    @classmethod
    def single(cls, axis_theta=0.0, axis_phi=0.0, alpha=np.pi, radial_window=(0.94, 1.06),
               polar_cap_deg=60.0) -> "BinGrid":
        return cls(np.array([axis_theta]), np.array([axis_phi]), float(alpha), tuple(radial_window),
                   float(np.deg2rad(polar_cap_deg)))

    def __len__(self):
        return len(self.theta)

    @property
    def axes(self) -> np.ndarray:
        return unit_vector(self.theta, self.phi)

    def bin(self, i: int) -> ConicalBin:
        return ConicalBin(self.axes[i], self.alpha, self.radial_window)

    def antipode(self) -> np.ndarray:
        """Index of the bin whose axis is -axis (or -1 when absent)."""
        ax = self.axes
        out = np.full(len(self), -1, dtype=int)
        dots = ax @ (-ax).T
        j = np.argmax(dots, axis=0)
        ok = dots[j, np.arange(len(self))] > 1 - 1e-9
        out[ok] = j[ok]
        return out


def cone_membership(cloud: HaloCloud, axes: np.ndarray, alpha: float, radial_window) -> np.ndarray:
    """Boolean (n_atoms, n_axes): angle to axis <= alpha and k_norm inside the window."""
    cos_a = np.cos(alpha)
    inside_r = (cloud.k_norm >= radial_window[0]) & (cloud.k_norm <= radial_window[1])
    # boundary convention is inclusive; allow for rounding of the dot product
    return ((cloud.k_hat @ axes.T) >= cos_a - 1e-12) & inside_r[:, None]


def atoms_in_bin(cloud: HaloCloud, b: ConicalBin, spin: int | None = None) -> int:
    m = cone_membership(cloud, b.axis[None, :], b.half_angle_alpha, b.radial_window)[:, 0]
    if spin is not None:
        m &= cloud.spin == spin
    return int(m.sum())


def polarisation(n_up, n_down):
    """(n_up - n_down) / (n_up + n_down); raises when both counts are zero."""
    n_up = np.asarray(n_up, dtype=float)
    n_down = np.asarray(n_down, dtype=float)
    tot = n_up + n_down
    if np.any(tot <= 0):
        raise ZeroDivisionError("polarisation undefined for an empty bin")
    return (n_up - n_down) / tot


def default_radial_window(dk: float = 0.03) -> tuple[float, float]:
    return (1.0 - 2.0 * dk, 1.0 + 2.0 * dk)


# -- momentum modes ---------------------------------------------------------------

@dataclass(frozen=True)
class ModeGrid:
    """Equal-area cells: uniform in z = sin(elevation) and in azimuth."""

    n_z: int
    n_theta: int

    def __post_init__(self):
        if self.n_z < 2 or self.n_z % 2 or self.n_theta < 2 or self.n_theta % 2:
            raise ValueError("n_z and n_theta must be even and >= 2")

    @classmethod
    def from_solid_angle(cls, omega: float) -> "ModeGrid":
        side = np.sqrt(omega)
        n_z = max(2, int(round(2.0 / side)))
        n_z += n_z % 2
        dz = 2.0 / n_z
        n_theta = max(2, int(round(2 * np.pi * dz / omega)))
        n_theta += n_theta % 2
        return cls(n_z, n_theta)

    @property
    def n_modes(self) -> int:
        return self.n_z * self.n_theta

    @property
    def solid_angle(self) -> float:
        return 4 * np.pi / self.n_modes

    def index(self, k_hat: np.ndarray) -> np.ndarray:
        k_hat = np.asarray(k_hat)
        iz = np.floor((k_hat[:, 2] + 1.0) * (self.n_z / 2.0)).astype(np.int64)
        iz = np.clip(iz, 0, self.n_z - 1)
        az = np.mod(np.arctan2(k_hat[:, 1], k_hat[:, 0]), 2 * np.pi)
        it = np.floor(az * (self.n_theta / (2 * np.pi))).astype(np.int64) % self.n_theta
        return iz * self.n_theta + it

    def antipode(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        iz, it = np.divmod(idx, self.n_theta)
        return (self.n_z - 1 - iz) * self.n_theta + (it + self.n_theta // 2) % self.n_theta

    def centers(self, idx=None) -> np.ndarray:
        idx = np.arange(self.n_modes) if idx is None else np.asarray(idx)
        iz, it = np.divmod(idx, self.n_theta)
        z = -1.0 + (iz + 0.5) * 2.0 / self.n_z
        th = (it + 0.5) * 2 * np.pi / self.n_theta
        rho = np.sqrt(1 - z * z)
        return np.column_stack([rho * np.cos(th), rho * np.sin(th), z])

    def interior(self, phi_max: float) -> np.ndarray:
        """Mode indices whose z-band lies fully inside |elevation| <= phi_max."""
        zmax = np.sin(phi_max)
        iz = np.arange(self.n_z)
        lo = -1.0 + iz * 2.0 / self.n_z
        hi = lo + 2.0 / self.n_z
        ok = (lo >= -zmax - 1e-12) & (hi <= zmax + 1e-12)
        bands = iz[ok]
        return (bands[:, None] * self.n_theta + np.arange(self.n_theta)[None, :]).ravel()


@dataclass
class CountTable:
    """Per-shot spin-resolved counts over columns (modes or bins).

    ``up`` and ``down`` are sparse (n_shots, n_columns) count matrices; the
    derived per-column quantities are J = (n_up - n_down)/2, N = (n_up + n_down)/2.
    """

    shot_ids: np.ndarray
    up: sparse.csc_matrix
    down: sparse.csc_matrix

    @property
    def n_shots(self) -> int:
        return len(self.shot_ids)

    def J(self):
        return (self.up - self.down) * 0.5

    def N(self):
        return (self.up + self.down) * 0.5


def _table_from_columns(cloud: HaloCloud, col: np.ndarray, n_cols: int, shot_ids=None) -> CountTable:
    shot_ids = np.unique(cloud.shot_id) if shot_ids is None else np.asarray(shot_ids)
    row = np.searchsorted(shot_ids, cloud.shot_id)
    mats = []
    for s in (SpinState.UP, SpinState.DOWN):
        m = cloud.spin == s
        data = np.ones(int(m.sum()), dtype=np.float64)
        mats.append(sparse.csc_matrix((data, (row[m], col[m])), shape=(len(shot_ids), n_cols)))
    return CountTable(shot_ids, mats[0], mats[1])


def mode_count_table(cloud: HaloCloud, modes: ModeGrid, radial_window, shot_ids=None) -> CountTable:
    sel = (cloud.k_norm >= radial_window[0]) & (cloud.k_norm <= radial_window[1])
    cl = cloud.select(sel)
    return _table_from_columns(cl, modes.index(cl.k_hat), modes.n_modes,
                               shot_ids if shot_ids is not None else np.unique(cloud.shot_id))


def bin_count_table(cloud: HaloCloud, grid: BinGrid, shot_ids=None) -> CountTable:
    """Cone-level table: column b counts atoms inside bin b (bins may overlap)."""
    shot_ids = np.unique(cloud.shot_id) if shot_ids is None else np.asarray(shot_ids)
    member = cone_membership(cloud, grid.axes, grid.alpha, grid.radial_window)
    row = np.searchsorted(shot_ids, cloud.shot_id)
    mats = []
    for s in (SpinState.UP, SpinState.DOWN):
        m = member & (cloud.spin == s)[:, None]
        counts = np.zeros((len(shot_ids), len(grid)))
        a, b = np.nonzero(m)
        np.add.at(counts, (row[a], b), 1.0)
        mats.append(sparse.csc_matrix(counts))
    return CountTable(shot_ids, mats[0], mats[1])


def exx_direct(table: CountTable, plus, minus) -> float:
    """sum_shots J(k) J(-k) / sum_shots N(k) N(-k), summed over matched columns."""
    plus = np.asarray(plus)
    minus = np.asarray(minus)
    J, N = table.J(), table.N()
    num = J[:, plus].multiply(J[:, minus]).sum()
    den = N[:, plus].multiply(N[:, minus]).sum()
    if den == 0:
        raise ZeroDivisionError("no coincident counts in the bin pair")
    return float(num / den)


# -- localised correlators ------------------------------------------------------------

SPIN_COMBOS = ((SpinState.UP, SpinState.UP), (SpinState.UP, SpinState.DOWN),
               (SpinState.DOWN, SpinState.UP), (SpinState.DOWN, SpinState.DOWN))
COMBO_NAMES = ("uu", "ud", "du", "dd")
_SIGNS = np.array([1.0, -1.0, -1.0, 1.0])


@dataclass
class PairMoments:
    """Shot-by-shot coincidence matrices of one double cone.

    ``A[c, s, t] = sum_k n_i^s(k) n_j^t(-k)`` for spin combo c = (i, j), k
    running over the modes of the +q cone.  The diagonal holds same-shot
    coincidences, the off-diagonal the uncorrelated cross-shot reference.
    """

    A: np.ndarray  # (4, S, S)
    singles: np.ndarray  # (4, S): per-shot counts n_up(+), n_down(+), n_up(-), n_down(-)

    @property
    def n_shots(self) -> int:
        return self.A.shape[1]


def pair_moments(table: CountTable, plus_cols, minus_cols) -> PairMoments:
    plus_cols = np.asarray(plus_cols)
    minus_cols = np.asarray(minus_cols)
    side = {("+", SpinState.UP): table.up[:, plus_cols], ("+", SpinState.DOWN): table.down[:, plus_cols],
            ("-", SpinState.UP): table.up[:, minus_cols], ("-", SpinState.DOWN): table.down[:, minus_cols]}
    A = np.empty((4, table.n_shots, table.n_shots))
    for c, (i, j) in enumerate(SPIN_COMBOS):
        A[c] = (side[("+", i)] @ side[("-", j)].T).toarray()
    singles = np.vstack([np.asarray(side[k].sum(axis=1)).ravel()
                         for k in (("+", SpinState.UP), ("+", SpinState.DOWN), ("-", SpinState.UP),
                                   ("-", SpinState.DOWN))])
    return PairMoments(A, singles)


def _moment_sums(m: PairMoments, W: np.ndarray):
    """Numerator, cross-shot denominator and same-shot diagonals for weight rows W (R, S)."""
    diag = np.einsum("css->cs", m.A)  # (4, S)
    wsum = W.sum(axis=1)  # (R,)
    w2 = (W * W).sum(axis=1)
    same = W @ diag.T  # (R, 4) sum_s w_s A_ss
    quad = np.column_stack([((W @ m.A[c]) * W).sum(axis=1) for c in range(4)])
    selfsq = (W * W) @ diag.T
    n_cross = wsum * wsum - w2
    with np.errstate(invalid="ignore", divide="ignore"):
        num = same / wsum[:, None]
        den = (quad - selfsq) / n_cross[:, None]
    return num, den, same


@dataclass
class CorrelationRecord:
    g2_uu: float
    g2_ud: float
    g2_du: float
    g2_dd: float
    G: float
    E_xx: float
    E_direct: float
    parity: float
    nbar_estimate: float
    stderr: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def g2(self) -> np.ndarray:
        return np.array([self.g2_uu, self.g2_ud, self.g2_du, self.g2_dd])


def _records_from_sums(num, den, same):
    """Vectorised over resamples: returns g2 (R, 4), G, E_xx, E_direct, parity."""
    with np.errstate(invalid="ignore", divide="ignore"):
        g2 = num / den
        G = g2.mean(axis=1)
        exx = (g2 * _SIGNS).sum(axis=1) / g2.sum(axis=1)
        edirect = (same * _SIGNS).sum(axis=1) / same.sum(axis=1)
        parity = np.where(G > 1, exx / (1.0 - 1.0 / G), np.nan)
    return g2, G, exx, edirect, parity


def bootstrap_weights(n_shots: int, n_resamples: int, rng: np.random.Generator) -> np.ndarray:
    """Multiplicity rows of shot-level resampling with replacement."""
    idx = rng.integers(0, n_shots, size=(n_resamples, n_shots))
    W = np.zeros((n_resamples, n_shots))
    np.add.at(W, (np.repeat(np.arange(n_resamples), n_shots), idx.ravel()), 1.0)
    return W


def correlation_record(m: PairMoments, W: np.ndarray | None = None, min_count: int = 10) -> CorrelationRecord:
    """g2 set, G, E_xx (both routes) and scaled parity for one double cone.

    ``W`` optional bootstrap multiplicities; the standard errors in
    ``stderr`` are the resample standard deviations, with non-finite
    resamples skipped and counted.
    """
    ones = np.ones((1, m.n_shots))
    g2, G, exx, edir, par = _records_from_sums(*_moment_sums(m, ones))
    flags = []
    tot = m.singles.sum(axis=1)
    if np.any(tot < min_count):
        flags.append("low_statistics")
    if not np.isfinite(G[0]) or G[0] <= 1:
        flags.append("no_correlation")
    stderr = {}
    if W is not None:
        bg2, bG, bexx, bedir, bpar = _records_from_sums(*_moment_sums(m, W))
        for name, arr in (("G", bG), ("E_xx", bexx), ("E_direct", bedir), ("parity", bpar)):
            ok = np.isfinite(arr)
            stderr[name] = float(arr[ok].std(ddof=1)) if ok.sum() > 1 else np.inf
            stderr[f"{name}_skipped"] = int((~ok).sum())
        for c, name in enumerate(COMBO_NAMES):
            arr = bg2[:, c]
            ok = np.isfinite(arr)
            stderr[f"g2_{name}"] = float(arr[ok].std(ddof=1)) if ok.sum() > 1 else np.inf
    p = float(par[0])
    se = stderr.get("parity")
    if np.isfinite(p) and se is not None and abs(p) > 1 + 3 * se:
        flags.append("parity_out_of_range")
    nbar = nbar_from_G(G[0]) if np.isfinite(G[0]) and G[0] > 1 else np.inf
    counts = {"up_plus": int(tot[0]), "down_plus": int(tot[1]), "up_minus": int(tot[2]),
              "down_minus": int(tot[3]), "coincidences": int(np.einsum("css->", m.A))}
    return CorrelationRecord(*map(float, g2[0]), float(G[0]), float(exx[0]), float(edir[0]), p, nbar,
                             stderr=stderr, counts=counts, flags=flags)


def cone_modes(modes: ModeGrid, axis, alpha: float, allowed: np.ndarray | None = None) -> np.ndarray:
    """Mode indices with centres inside the cone around ``axis``."""
    idx = np.arange(modes.n_modes) if allowed is None else np.asarray(allowed)
    cen = modes.centers(idx)
    return idx[cen @ np.asarray(axis, dtype=float) >= np.cos(alpha) - 1e-12]


def g2_bb_local(cloud: HaloCloud, spin_i: int, spin_j: int, q, alpha: float = np.pi / 10,
                modes: ModeGrid | None = None, radial_window=(0.94, 1.06), n_resamples: int = 0,
                rng: np.random.Generator | None = None, min_count: int = 10) -> tuple[float, float]:
    """Localised back-to-back g2 between spin_i along +q and spin_j along -q.

    Returns ``(g2, stderr)``; stderr is inf when no bootstrap was requested or
    when the counts are below ``min_count``.
    """
    if modes is None:
        modes = ModeGrid.from_solid_angle((alpha / 4) ** 2)
    table = mode_count_table(cloud, modes, radial_window)
    if table.n_shots < 2:
        raise ValueError("need at least two shots for the cross-shot reference")
    plus = cone_modes(modes, q, alpha)
    m = pair_moments(table, plus, modes.antipode(plus))
    W = bootstrap_weights(table.n_shots, n_resamples, rng) if n_resamples else None
    rec = correlation_record(m, W, min_count=min_count)
    c = SPIN_COMBOS.index((spin_i, spin_j))
    val = rec.g2[c]
    se = rec.stderr.get(f"g2_{COMBO_NAMES[c]}", np.inf)
    if "low_statistics" in rec.flags:
        se = np.inf
    return float(val), float(se)


def exx_from_g2(g2_uu, g2_ud=None, g2_du=None, g2_dd=None) -> float:
    """E_xx from the four localised g2 values (or a CorrelationRecord)."""
    if isinstance(g2_uu, CorrelationRecord):
        g = g2_uu.g2
    else:
        g = np.array([g2_uu, g2_ud, g2_du, g2_dd], dtype=float)
    den = g.sum()
    if den == 0:
        raise ZeroDivisionError("all g2 values are zero")
    return float((g * _SIGNS).sum() / den)


def scale_parity(exx: float, G: float) -> float:
    """Single-pair parity (1 - 1/G)^-1 E_xx; G -> inf leaves E_xx unchanged."""
    if not G > 1:
        raise ValueError(f"parity scaling undefined for G = {G} <= 1")
    if np.isinf(G):
        return float(exx)
    return float(exx / (1.0 - 1.0 / G))


def nbar_from_G(G: float) -> float:
    """Mode occupancy from G = 1 + 1/(2 nbar); returns inf when G - 1 underflows."""
    if not G > 1:
        raise ValueError(f"nbar undefined for G = {G} <= 1")
    excess = G - 1.0
    if excess < 1e-12:
        return np.inf
    return 1.0 / (2.0 * excess)


@dataclass
class BootstrapResult:
    stderr: float
    n_skipped: int
    n_resamples: int


def bootstrap(n_shots: int, estimator: Callable[[np.ndarray], float], n_resamples: int = 1000,
              rng: np.random.Generator | None = None) -> BootstrapResult:
    """Standard deviation of ``estimator(weights)`` over shot-level resamples.

    ``estimator`` receives a multiplicity vector of length ``n_shots``.
    Resamples on which it raises or returns a non-finite value are skipped.
    """
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    rng = np.random.default_rng() if rng is None else rng
    W = bootstrap_weights(n_shots, n_resamples, rng)
    vals = []
    skipped = 0
    for w in W:
        try:
            v = float(estimator(w))
        except (ValueError, ZeroDivisionError, FloatingPointError):
            skipped += 1
            continue
        if np.isfinite(v):
            vals.append(v)
        else:
            skipped += 1
    se = float(np.std(vals, ddof=1)) if len(vals) > 1 else np.inf
    return BootstrapResult(se, skipped, n_resamples)


# -- Delta-k resolved (bin-integrated) correlator ------------------------------------------

@dataclass
class G2Result:
    edges: np.ndarray
    g2: np.ndarray
    numerator: np.ndarray
    denominator: np.ndarray
    valid: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def g2_bb_integrated(cloud: HaloCloud, spin_i: int, spin_j: int, dk_edges, shot_offsets=(1, 2, 3),
                     radial_window=None) -> G2Result:
    """Back-to-back g2 as a function of |k_i + k'_j| over the whole halo.

    Numerator: same-shot pair counts per |dk| shell, averaged over shots.
    Denominator: the same histogram with k'_j taken from shot s + offset,
    averaged over all such shot pairs.  Cells without reference counts are
    marked invalid.
    """
    edges = np.asarray(dk_edges, dtype=float)
    if radial_window is not None:
        cloud = cloud.select((cloud.k_norm >= radial_window[0]) & (cloud.k_norm <= radial_window[1]))
    shots = np.unique(cloud.shot_id)
    if len(shots) < 2:
        raise ValueError("need at least two shots")
    k = cloud.k
    per_shot = []
    for s in shots:
        m = cloud.shot_id == s
        ki = k[m & (cloud.spin == spin_i)]
        kj = k[m & (cloud.spin == spin_j)]
        per_shot.append((ki, cKDTree(-kj) if len(kj) else None))

    def hist(ki, tree):
        if tree is None or len(ki) == 0:
            return np.zeros(len(edges) - 1)
        cum = cKDTree(ki).count_neighbors(tree, edges).astype(float)
        out = np.diff(cum)
        if edges[0] <= 0:
            out[0] += cum[0]  # the first shell includes exact zero separation
        return out

    num = np.zeros(len(edges) - 1)
    for ki, tree in per_shot:
        num += hist(ki, tree)
    num /= len(shots)
    den = np.zeros(len(edges) - 1)
    n_pairs = 0
    for off in shot_offsets:
        if off >= len(shots):
            continue
        for a in range(len(shots)):
            b = (a + off) % len(shots)
            den += hist(per_shot[a][0], per_shot[b][1])
            n_pairs += 1
    den /= max(n_pairs, 1)
    valid = den > 0
    g2 = np.full(len(num), np.nan)
    g2[valid] = num[valid] / den[valid]
    return G2Result(edges, g2, num, den, valid)
