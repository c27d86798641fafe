from dataclasses import replace

import numpy as np
import pytest

from dbpot.fidigota import (Digota, OutputDrive, ParameterError, calibrate_slopes,
                            code_for_current, code_strength, drive_of, new_state, run_open_loop, tick,
                            trim_output_stage)


def idle_period_ticks(params, n=20000):
    core = Digota(params)
    s = new_state(params)
    starts = []
    for k in range(n):
        was_up = s.up
        core.tick(s, 0.0)
        if s.up and not was_up:
            starts.append(k)
    return np.diff(starts)


def test_new_state_defaults(params04):
    s = new_state(params04)
    assert (s.vib1, s.vib2, s.q1, s.q2, s.t) == (0.0, 0.0, 0, 0, 0.0)
    assert s.phase == "up"


def test_new_state_rejects_slow_clock(params04):
    with pytest.raises(ParameterError) as err:
        new_state(replace(params04, fclk=5e3))
    assert any("Tclk" in p for p in err.value.problems)


def test_new_state_rejects_negative_cfi(params04):
    with pytest.raises(ParameterError) as err:
        new_state(replace(params04, Cfi=-1e-15))
    assert any(p.startswith("Cfi") for p in err.value.problems)


def test_validation_lists_every_offender(params04):
    problems = replace(params04, gm=0.0, rout=-1.0).validate()
    assert len(problems) == 2


def test_drive_mapping():
    assert drive_of(0, 1) is OutputDrive.P
    assert drive_of(1, 0) is OutputDrive.N
    assert drive_of(0, 0) is OutputDrive.Z and drive_of(1, 1) is OutputDrive.Z


def test_calibrated_cm_current(params04):
    # 2 * 1.9e-15 * 0.2 / 103e-6
    assert calibrate_slopes(params04) == pytest.approx(7.3786e-12, rel=1e-4)
    assert calibrate_slopes(replace(params04, T0=params04.T0 / 2)) == pytest.approx(2 * calibrate_slopes(params04))


def test_idle_period_equals_t0(params04):
    d = idle_period_ticks(params04)
    assert d.size >= 100
    # every period within one clock, and the average close to T0
    assert np.all(np.abs(d * params04.Tclk - params04.T0) <= params04.Tclk)
    assert d.mean() * params04.Tclk == pytest.approx(params04.T0, rel=0.01)


def test_idle_outputs_only_z(params04):
    out = run_open_loop(params04, np.zeros(20000))
    assert np.all(out == 0)


def test_idle_period_other_threshold(params04):
    p = replace(params04, Vth_buff=0.15)
    d = idle_period_ticks(p)
    assert np.all(np.abs(d * p.Tclk - p.T0) <= p.Tclk)


def test_pulse_count_monotone_in_vd(params04):
    vds = np.linspace(0, 2e-5, 20)
    counts = [(run_open_loop(params04, np.full(5000, v)) == 1).sum() for v in vds]
    assert np.all(np.diff(counts) >= 0)
    assert counts[-1] > counts[0]


def test_vd_sign_flip_swaps_p_and_n(params04):
    for v in (3e-6, 1e-5):
        pos = run_open_loop(params04, np.full(5000, v))
        neg = run_open_loop(params04, np.full(5000, -v))
        assert (pos == 1).sum() == (neg == -1).sum()
        assert (pos == -1).sum() == (neg == 1).sum()


def test_functional_tick_does_not_mutate(params04):
    s0 = new_state(params04)
    s1, drive = tick(s0, 1e-6, params04)
    assert s0.n == 0 and s1.n == 1
    assert drive is OutputDrive.Z


def test_code_strength_map():
    assert code_strength(1) == 1.0
    assert code_strength(0) == pytest.approx(0.5)
    assert code_strength(255) == 128.0
    assert code_strength(3) == 2 * code_strength(1)


def test_trim_baseline_matches_reported_drive(params03):
    p = trim_output_stage(params03, 1)
    assert p.ip_eff == pytest.approx(4.89e-9)
    assert p.in_eff == pytest.approx(10.16e-9)


def test_trim_zero_is_weakest_but_alive(params04):
    p = trim_output_stage(params04, 0)
    assert 0 < p.ip_eff < params04.ip
    assert p.ip_eff == pytest.approx(code_strength(255) * params04.ip / 256)


@pytest.mark.parametrize("code", [-1, 256, 1.5])
def test_trim_rejects_bad_codes(params04, code):
    with pytest.raises(ValueError):
        trim_output_stage(params04, code)


def test_code_for_current(params04):
    code = code_for_current(params04, 50e-9)
    assert trim_output_stage(params04, code).ip_eff >= 100e-9
    assert trim_output_stage(params04, code - 1).ip_eff < 100e-9
    with pytest.raises(ValueError):
        code_for_current(params04, 1e-5)
