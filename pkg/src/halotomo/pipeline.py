"""Stage orchestration shared by the CLI and the acceptance tests.

Randomness is keyed, never sequential: shot ``s`` at tau index ``i`` always
draws from ``shot_rng(seed, STAGE_SIMULATE, i, s)`` and the bootstrap of tau
index ``i`` from its own spawned stream.  Outputs therefore do not depend on
how work is split across processes.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ExperimentConfig
from .correlate import BinGrid, ModeGrid
from .estimate import AngularMap, map_field, map_gradient
from .model import min_phase_bell, min_phase_ramsey, bell_sql_threshold
from .reconstruct import (
    HaloCloud,
    ResolutionParams,
    reconstruct_cloud,
    resolution_monte_carlo,
    resolution_moments,
)
from .simulate import Events, Shot, shot_rng, simulate_shot

STAGE_SIMULATE = 0
STAGE_BOOTSTRAP = 1
STAGE_RESOLUTION = 2


def stage_rng(seed: int, stage: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(stage, index)))


def _shot_chunk(cfg: ExperimentConfig, tau_index: int, shots: range) -> tuple[list[Shot], list[Events]]:
    c = cfg.constants()
    tau = cfg.sequence.taus[tau_index]
    seq = cfg.sequence.sequence(tau)
    det = cfg.detector.detector()
    fm = cfg.field.model()
    out_s, out_e = [], []
    for s in shots:
        shot_id = tau_index * cfg.sequence.shots_per_tau + s
        shot, ev = simulate_shot(cfg.halo, seq, det, fm, c, shot_rng(cfg.seed, STAGE_SIMULATE, tau_index, s), shot_id)
        out_s.append(shot)
        out_e.append(ev)
    return out_s, out_e


def _chunks(n: int, k: int) -> list[range]:
    k = max(1, min(k, n))
    edges = np.linspace(0, n, k + 1).astype(int)
    return [range(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _executor(threads: int):
    return ProcessPoolExecutor(max_workers=threads) if threads > 1 else None


def resolve_threads(threads: int | None) -> int:
    if threads is None or threads <= 0:
        return os.cpu_count() or 1
    return threads


def simulate(cfg: ExperimentConfig, threads: int = 1, keep_truth: bool = True):
    """Yield ``(tau_index, tau, shots, events)`` for every tau in order.

    Shots within a tau are split into ``threads`` chunks; results are
    reassembled in shot order.
    """
    n = cfg.sequence.shots_per_tau
    ex = _executor(threads)
    try:
        for i, tau in enumerate(cfg.sequence.taus):
            parts = _chunks(n, threads)
            if ex is None:
                results = [_shot_chunk(cfg, i, r) for r in parts]
            else:
                results = list(ex.map(_shot_chunk, [cfg] * len(parts), [i] * len(parts), parts))
            shots = [s for r in results for s in r[0]] if keep_truth else []
            events = Events.concatenate([e for r in results for e in r[1]])
            yield i, float(tau), shots, events
    finally:
        if ex is not None:
            ex.shutdown()


def reconstruct(cfg: ExperimentConfig, events: Events) -> tuple[HaloCloud, dict]:
    a = cfg.analysis
    return reconstruct_cloud(events, cfg.detector.detector(), cfg.constants(), cfg.halo.v_r,
                             fit_lensing=a.fit_lensing, refine=a.refine_ellipsoid, r0=a.r0)


def field_grid(cfg: ExperimentConfig, integrated: bool = False) -> BinGrid:
    a = cfg.analysis
    if integrated:
        return BinGrid.single(alpha=np.pi, radial_window=tuple(a.radial_window), polar_cap_deg=a.polar_cap_deg)
    step = 2 * a.alpha_field if a.field_grid_step is None else a.field_grid_step
    return BinGrid.equirectangular(a.alpha_field, step, a.polar_cap_deg, tuple(a.radial_window))


def gradient_grid(cfg: ExperimentConfig) -> BinGrid:
    a = cfg.analysis
    step = a.alpha_gradient if a.gradient_grid_step is None else a.gradient_grid_step
    return BinGrid.equirectangular(a.alpha_gradient, step, a.polar_cap_deg, tuple(a.radial_window))


def mode_grid(cfg: ExperimentConfig) -> ModeGrid:
    from dataclasses import replace

    halo = cfg.halo
    if cfg.analysis.mode_nbar is not None:
        halo = replace(halo, mode_occupancy_nbar=cfg.analysis.mode_nbar)
    return ModeGrid.from_solid_angle(halo.mode_solid_angle(tuple(cfg.analysis.radial_window)))


def tomography(cfg: ExperimentConfig, clouds_by_tau) -> tuple[AngularMap, AngularMap]:
    """Per-bin field map and the halo-integrated (alpha = pi) fit."""
    g = cfg.constants().gamma
    win = tuple(cfg.analysis.field_prior_window)
    per_bin = map_field(clouds_by_tau, field_grid(cfg), g, win, cfg.analysis.min_count)
    whole = map_field(clouds_by_tau, field_grid(cfg, integrated=True), g, win, cfg.analysis.min_count)
    return per_bin, whole


def gradiometry(cfg: ExperimentConfig, clouds_by_tau) -> AngularMap:
    a = cfg.analysis
    return map_gradient(clouds_by_tau, gradient_grid(cfg), mode_grid(cfg), cfg.constants().gamma, cfg.halo.v_r,
                        n_resamples=a.n_resamples, rng=stage_rng(cfg.seed, STAGE_BOOTSTRAP),
                        m_max=a.gradient_scan_max, min_count=a.min_count)


def resolution_params(cfg: ExperimentConfig) -> ResolutionParams:
    r = cfg.resolution
    T = cfg.constants().t_star_stationary if r.T is None else r.T
    return ResolutionParams.from_dimensionless(r.sigma, T, r.tau_n, r.xi, r.w)


def resolution_table(cfg: ExperimentConfig) -> dict:
    p = resolution_params(cfg)
    S = p.v0 * p.T if cfg.resolution.S is None else cfg.resolution.S
    closed = resolution_moments(p, S)
    mc = resolution_monte_carlo(p, S, cfg.resolution.n_samples, stage_rng(cfg.seed, STAGE_RESOLUTION))
    return {"params": {"sigma": p.sigma, "sigma_v": p.sigma_v, "T": p.T, "t_star": p.t_star_interrogation,
                       "v0": p.v0, "tau_n": p.tau_n, "xi": p.xi, "w": p.w, "S": S},
            "closed": closed, "monte_carlo": mc,
            "rel_diff": {"mean": mc["mean"] / closed["mean"] - 1.0, "width": mc["width"] / closed["width"] - 1.0}}


def bounds_table(cfg: ExperimentConfig) -> dict:
    etas = np.asarray(cfg.bounds.etas, dtype=float)
    n = cfg.bounds.n_atoms
    rows = [{"eta": float(e), "ramsey": float(min_phase_ramsey(n, e)), "bell": float(min_phase_bell(e)),
             "sql_ideal": float(min_phase_ramsey(n, 1.0)), "heisenberg": 1.0 / n} for e in etas]
    return {"n_atoms": n, "rows": rows, "bell_beats_ideal_sql_above_eta": bell_sql_threshold()}
