from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from halotomo.model import FieldModel, PhysicalConstants, SpinState, joint_xbasis_distribution
from halotomo.simulate import (
    DetectorConfig,
    Events,
    HaloConfig,
    SequenceConfig,
    detect,
    free_fall_time,
    run_parity,
    run_ramsey,
    sample_halo,
    shot_rng,
    simulate_shot,
)

C = PhysicalConstants.from_convention("angular")
NOBLUR = DetectorConfig(efficiency_eta=1.0).without_blur()


def test_halo_config_validation():
    with pytest.raises(ValueError):
        HaloConfig(radial_width_frac=0.0)
    with pytest.raises(ValueError):
        HaloConfig(radial_width_frac=0.2)
    with pytest.raises(ValueError):
        HaloConfig(polar_cap_deg=90)
    with pytest.raises(ValueError):
        HaloConfig(mean_pairs_per_shot=-1)


def test_default_source_width():
    assert HaloConfig().source_sigma == pytest.approx(35.36e-6, rel=1e-3)
    assert HaloConfig().separation_time == pytest.approx(50e-6 / 0.12)


def test_detector_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(efficiency_eta=1.1)
    with pytest.raises(ValueError):
        DetectorConfig(lensing_matrix=-np.eye(3))
    with pytest.raises(ValueError):
        DetectorConfig(lensing_matrix=[[1, 0.1, 0], [0, 1, 0], [0, 0, 1]])


def test_parity_timing_constraint():
    halo = HaloConfig()
    with pytest.raises(ValueError):
        SequenceConfig("parity", interrogation_tau=1e-4).check_timing(halo)
    SequenceConfig("parity", interrogation_tau=0.8e-3).check_timing(halo)
    SequenceConfig("ramsey", interrogation_tau=0.0).check_timing(halo)


def test_empty_shot():
    shot = sample_halo(HaloConfig(mean_pairs_per_shot=0), np.random.default_rng(0))
    assert shot.n_atoms == 0
    ev = detect(shot, NOBLUR, C, np.random.default_rng(1))
    assert len(ev) == 0


def test_pair_momentum_sums_to_zero():
    shot = sample_halo(HaloConfig(mean_pairs_per_shot=500), np.random.default_rng(3))
    v = shot.velocity_cm
    assert np.array_equal(v[0::2] + v[1::2], np.zeros_like(v[0::2]))
    assert np.array_equal(shot.source_position[0::2], shot.source_position[1::2])
    assert np.array_equal(shot.pair_id[0::2], shot.pair_id[1::2])


def test_halo_speed_and_width_statistics():
    cfg = HaloConfig(mean_pairs_per_shot=1e5)
    shot = sample_halo(cfg, np.random.default_rng(4))
    speed = shot.pair_speeds()
    se = speed.std() / np.sqrt(len(speed))
    assert abs(speed.mean() - cfg.v_r) < 3 * se
    assert speed.std() / speed.mean() == pytest.approx(0.03, rel=0.05)


def test_halo_directions_uniform_and_capped():
    cfg = HaloConfig(mean_pairs_per_shot=1e5)
    d = sample_halo(cfg, np.random.default_rng(5)).pair_directions()
    az = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2 * np.pi)
    counts, _ = np.histogram(az, bins=36, range=(0, 2 * np.pi))
    assert stats.chisquare(counts).pvalue > 0.01
    assert np.all(np.abs(d[:, 2]) <= np.sin(np.deg2rad(60)) + 1e-15)


def test_same_seed_same_shot():
    cfg = HaloConfig(mean_pairs_per_shot=200)
    seq = SequenceConfig("ramsey", interrogation_tau=1e-6)
    a = simulate_shot(cfg, seq, DetectorConfig(), FieldModel(0.5), C, shot_rng(9, 0, 1, 2))
    b = simulate_shot(cfg, seq, DetectorConfig(), FieldModel(0.5), C, shot_rng(9, 0, 1, 2))
    for x, y in zip(a, b):
        for k in vars(x):
            assert np.array_equal(np.asarray(getattr(x, k)), np.asarray(getattr(y, k)))
    c = simulate_shot(cfg, seq, DetectorConfig(), FieldModel(0.5), C, shot_rng(9, 0, 1, 3))
    assert not np.array_equal(a[1].t_star, c[1].t_star)


def test_ramsey_zero_phase_all_up():
    shot = sample_halo(HaloConfig(mean_pairs_per_shot=300), np.random.default_rng(0))
    out = run_ramsey(shot, FieldModel(0.0), SequenceConfig("ramsey", interrogation_tau=1e-6), C,
                     np.random.default_rng(1))
    assert np.all(out.spin == SpinState.UP)


def test_ramsey_zero_contrast_coin_flip():
    shot = sample_halo(HaloConfig(mean_pairs_per_shot=20000), np.random.default_rng(0))
    out = run_ramsey(shot, FieldModel(0.5), SequenceConfig("ramsey", interrogation_tau=1e-6, contrast=0.0), C,
                     np.random.default_rng(1))
    n = out.n_atoms
    assert abs(out.spin.mean() - 0.5) < 3 * 0.5 / np.sqrt(n)


def test_ramsey_antipodal_difference_matches_phase():
    # atoms moving along +x and -x in a linear field: Up fractions follow cos of each phase
    seq = SequenceConfig("ramsey", interrogation_tau=2e-6)
    b0 = 6.5 * np.pi / (C.gamma * seq.interrogation_tau)  # mean phase at a quarter fringe
    fm = FieldModel(b0, [50.0, 0, 0])
    cfg = HaloConfig(mean_pairs_per_shot=40000, polar_cap_deg=0.0)
    shot = sample_halo(cfg, np.random.default_rng(2))
    out = run_ramsey(shot, fm, seq, C, np.random.default_rng(3))
    plus = shot.velocity_cm[:, 0] > 0.0595
    minus = shot.velocity_cm[:, 0] < -0.0595
    # closed-form phases along +/- v_r x trajectories from t=pulse1 to pulse1+tau (source offset ~ 0)
    t0, t1 = seq.pulse1_time, seq.pulse1_time + seq.interrogation_tau
    phi_p = C.gamma * (b0 * (t1 - t0) + 50.0 * 0.06 * (t1**2 - t0**2) / 2)
    phi_m = C.gamma * (b0 * (t1 - t0) - 50.0 * 0.06 * (t1**2 - t0**2) / 2)
    diff = out.spin[plus].mean() - out.spin[minus].mean()
    expect = 0.5 * (np.cos(phi_p) - np.cos(phi_m))
    se = np.sqrt(0.25 / plus.sum() + 0.25 / minus.sum())
    assert abs(diff - expect) < 4 * se + 0.01
    assert abs(expect) > 0.1


def test_parity_zero_mixing_only_correlated():
    shot = sample_halo(HaloConfig(mean_pairs_per_shot=2000), np.random.default_rng(0))
    out = run_parity(shot, FieldModel(0.5), SequenceConfig("parity", interrogation_tau=1e-3), C,
                     np.random.default_rng(1))
    assert np.array_equal(out.spin[0::2], out.spin[1::2])


def test_parity_perpendicular_gradient_stays_correlated():
    cfg = HaloConfig(mean_pairs_per_shot=2000, polar_cap_deg=0.0)
    shot = sample_halo(cfg, np.random.default_rng(0))
    out = run_parity(shot, FieldModel(0.5, [0, 0, 5.0]), SequenceConfig("parity", interrogation_tau=1e-3), C,
                     np.random.default_rng(1))
    assert np.all(np.abs(out.truth_phi) < 1e-3)
    assert np.mean(out.spin[0::2] == out.spin[1::2]) > 0.999


def test_parity_frequencies_match_joint_distribution():
    # Phi = pi/4 for pairs along x: gamma v_r g tau^2 / 2 = pi/4
    c = PhysicalConstants.from_convention("cyclic_as_angular")
    tau = 1e-3
    g = (np.pi / 4) / (0.5 * c.gamma * 0.06 * tau**2)
    cfg = HaloConfig(mean_pairs_per_shot=10000, radial_width_frac=1e-6, polar_cap_deg=0.0)
    shot = sample_halo(cfg, np.random.default_rng(0))
    # align every pair along x
    shot.velocity_cm[:, :] = 0.0
    shot.velocity_cm[0::2, 0] = 0.06
    shot.velocity_cm[1::2, 0] = -0.06
    out = run_parity(shot, FieldModel(0.5, [g, 0, 0]), SequenceConfig("parity", interrogation_tau=tau), c,
                     np.random.default_rng(1))
    a, b = out.spin[0::2], out.spin[1::2]
    counts = np.array([np.sum((a == 1) & (b == 1)), np.sum((a == 1) & (b == 0)),
                       np.sum((a == 0) & (b == 1)), np.sum((a == 0) & (b == 0))])
    n = counts.sum()
    p = joint_xbasis_distribution(out.truth_phi[0])
    assert np.all(np.abs(counts - n * p) < 3 * np.sqrt(n * p * (1 - p)))
    signed = (counts[0] + counts[3] - counts[1] - counts[2]) / n
    assert abs(signed) < 3 / np.sqrt(n)


def test_stationary_atom_fall_time():
    assert free_fall_time(0.0, C) == pytest.approx(np.sqrt(2 * 0.848 / 9.80665), rel=1e-15)
    assert free_fall_time(0.0, C) == pytest.approx(0.416, abs=1e-3)


def test_zero_efficiency_no_events():
    shot = sample_halo(HaloConfig(mean_pairs_per_shot=500), np.random.default_rng(0))
    shot = replace(shot, spin=np.zeros(shot.n_atoms, dtype=np.int8))
    ev = detect(shot, DetectorConfig(efficiency_eta=0.0), C, np.random.default_rng(1))
    assert len(ev) == 0


def test_detected_count_binomial():
    eta = 0.1
    cfg = HaloConfig(mean_pairs_per_shot=5000)
    seq = SequenceConfig("ramsey", interrogation_tau=0.0)
    n_atoms = n_events = 0
    for s in range(20):
        shot, ev = simulate_shot(cfg, seq, DetectorConfig(efficiency_eta=eta), FieldModel(0.5), C,
                                 shot_rng(1, 0, 0, s))
        n_atoms += shot.n_atoms
        n_events += len(ev)
    assert abs(n_events - eta * n_atoms) < 3 * np.sqrt(n_atoms * eta * (1 - eta))


def test_events_concatenate_and_select():
    e = Events.empty()
    assert len(Events.concatenate([e, e])) == 0
    shot = sample_halo(HaloConfig(mean_pairs_per_shot=50), np.random.default_rng(0))
    shot = replace(shot, spin=np.ones(shot.n_atoms, dtype=np.int8))
    ev = detect(shot, NOBLUR, C, np.random.default_rng(1))
    both = Events.concatenate([ev, ev])
    assert len(both) == 2 * len(ev)
    assert len(both.select(both.spin == 1)) == 2 * len(ev)
