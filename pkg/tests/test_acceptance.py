"""Acceptance criteria 1-10, each reported as one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are listed
again in the terminal summary.
"""
import csv
import math
import time
from dataclasses import replace

import numpy as np
import pytest

import fd_oracle
from dbpot import freqmodel as fm
from dbpot.cli import lowest_decade_slope, main, noise_experiment
from dbpot.config import circuit_params, load_config
from dbpot.electrochem import (ElectrodeGeometry, RandlesCell, cottrell_disc, fit_transient,
                               limiting_current, microdisc_f, microdisc_transient)
from dbpot.fidigota import code_for_current
from dbpot.loopsim import (ConstantSource, LoopConfig, Range, current_sweep, linear_fit, model_load_config,
                           probe_frequencies, run_chrono, small_signal_probe)
from dbpot.pulses import PulseStream, decode, running_estimate, sensitivity_lsb_per_mM

pytestmark = pytest.mark.acceptance


def preset(label="base", name="nominal"):
    return circuit_params(load_config(name), label)


def summary(path):
    with open(path, newline="") as fh:
        return {r.get("param", r.get("metric")): float(r["value"]) for r in csv.DictReader(fh)}


def test_decoder_matches_recount(verdict):
    rng = np.random.default_rng(2024)
    ip, in_ = 8.1e-9, 4.89e-9
    mismatches, t_decode = 0, 0.0
    for _ in range(1000):
        M = int(rng.integers(10, 10**6 + 1))
        codes = rng.integers(-1, 2, M).astype(np.int8)
        stream = PulseStream(codes, 50e3)
        t = time.perf_counter()
        d = decode(stream, ip, in_)
        t_decode += time.perf_counter() - t
        # recount on the raw bytes, independent of the numpy reductions in decode
        raw = codes.tobytes()
        p, n = raw.count(b"\x01"), raw.count(b"\xff")
        if (d.p, d.n, d.M) != (p, n, M) or d.i_f != pytest.approx((p * ip - n * in_) / M, rel=1e-12):
            mismatches += 1
    ok = mismatches == 0 and t_decode < 10
    verdict(1, ok, f"decoder: {mismatches} mismatches in 1000 streams, decode time {t_decode:.2f} s (< 10 s)")
    assert ok


def test_closed_loop_current_fidelity(verdict):
    cp = load_config("ferro_sweep")
    ranges = [Range(label, imax, LoopConfig(params=circuit_params(cp, label), duration=0.5))
              for label, imax in (("vdd0p3", 3e-9), ("vdd0p4", 60e-9), ("vdd0p5", 650e-9))]
    currents = np.logspace(np.log10(600e-12), np.log10(650e-9), 20)
    t = time.perf_counter()
    pts = current_sweep(ranges, currents)
    wall = time.perf_counter() - t
    slope, _, r2 = linear_fit(currents, [p.decoded for p in pts])
    ok = r2 >= 0.991 and abs(slope - 1) <= 0.02 and wall < 300
    verdict(2, ok, f"current sweep 600 pA-650 nA: R2 {r2:.6f} (>= 0.991), slope {slope:.4f} (1 +- 0.02), "
                   f"{wall:.1f} s")
    assert ok


def test_transfer_function_identities(verdict):
    p = preset()
    tfs = [fm.stf(p), fm.ntf_quantization(p), fm.ntf_input(p)]
    den_err = max(float(np.max(np.abs(tf.den - tfs[0].den) / np.abs(tfs[0].den))) for tf in tfs)
    stf0 = fm.stf(p).dc
    ideal = p.T0 / (2 * p.Ion)
    strong = fm.stf(replace(p, gm=p.gm * 100)).dc
    A0 = fm.loop_gain(p)
    ntf0 = fm.ntf_quantization(p).dc
    ok = (den_err <= 1e-12 and abs(stf0 / 6.33e3 - 1) <= 0.01 and abs(strong / ideal - 1) < abs(stf0 / ideal - 1)
          and abs(strong / ideal - 1) < 1e-3 and abs(ntf0 * (1 + A0) - 1) <= 1e-9)
    verdict(3, ok, f"denominator mismatch {den_err:.1e}, STF(0) {stf0:.1f} s/A (6.33e3 +- 1%), "
                   f"x100 loop gain {strong:.1f} -> {ideal:.1f}, NTF_q(0)(1+A0) - 1 = {ntf0 * (1 + A0) - 1:.1e}")
    assert ok


def test_model_vs_simulation_bode(verdict):
    cp = load_config("bode")
    worst, n_pts, flagged = 0.0, 0, 0
    t = time.perf_counter()
    for label in ("base", "vdd0p3"):
        p = circuit_params(cp, label)
        cfg = LoopConfig(params=p, cell=RandlesCell(Rp=220e6, Cp=7e-9))
        for f in probe_frequencies(p, 5, 13):
            pt = small_signal_probe(cfg, f, 0.125 * p.Ion)
            n_pts += 1
            if not pt.valid:
                flagged += 1
                continue
            worst = max(worst, abs(pt.error_db))
    wall = time.perf_counter() - t
    ok = worst <= 3 and flagged == 0 and wall < 600
    verdict(4, ok, f"Bode: {n_pts} probe points up to f0/4, worst error {worst:.2f} dB (<= 3 dB), "
                   f"{flagged} saturated, {wall:.0f} s")
    assert ok


def test_noise_model(verdict):
    p = preset()
    f0 = 1 / p.T0
    # (a) white quantization PSD over [0, f0] integrates to Tclk^2/3
    quant_int = fm.quantization_noise_psd(p) * f0
    cfg = model_load_config(LoopConfig(params=p, duration=10.0, input_noise=True), 7e-9)
    _, f, P, spec = noise_experiment(cfg, 8)
    ratio = float(np.trapezoid(P, f)) / spec.inband_power()
    # (b) local slopes of the modeled total spectrum
    fg = np.logspace(-1, math.log10(0.5 * f0), 600)
    y = 10 * np.log10(fm.output_noise_spectrum(p, cfg.model_CL(), fg).total)
    half = 0.15
    centers = fg[(fg >= fg[0] * 10**half) & (fg <= fg[-1] / 10**half)]
    slopes = np.array([fm.loglog_slope(fg, y, c / 10**half, c * 10**half) for c in centers])
    floor = fm.loglog_slope(fg, y, fg[0], 10 * fg[0])
    has40 = bool(np.any(np.abs(slopes - 40) <= 6))
    has20 = bool(np.any(np.abs(slopes - 20) <= 6))
    # (c) no 1/f rise in the simulated spectrum
    low = lowest_decade_slope(f, P)
    ok_a = math.isclose(quant_int, p.Tclk**2 / 3, rel_tol=1e-12) and 0.2 <= ratio <= 5
    ok_b = abs(floor) <= 3 and has40 and has20
    ok_c = abs(low) <= 3
    ok = ok_a and ok_b and ok_c
    verdict(5, ok, f"noise: (a) quantization integral exact={math.isclose(quant_int, p.Tclk**2 / 3)}, "
                   f"sim/model power {ratio:.2f} (within 5x); (b) floor slope {floor:.2f} dB/dec, "
                   f"40+-6 region {has40}, 20+-6 region {has20}; (c) low-decade slope {low:.2f} dB/dec (0 +- 3)")
    assert ok


def test_sensitivity(verdict):
    s = sensitivity_lsb_per_mM(ElectrodeGeometry(a=25e-6), 4.89e-9, 5.0, 50e3)
    ok = abs(s / 334137 - 1) <= 0.10
    verdict(6, ok, f"sensitivity {s:,.0f} LSB/mM vs 334,137 ({100 * (s / 334137 - 1):+.1f}%, +- 10%)")
    assert ok


def test_minimum_acquisition_time(verdict):
    p = preset("vdd0p4")
    p = replace(p, cal_p=code_for_current(p, 10e-9), cal_n=code_for_current(p, 10e-9))
    res = run_chrono(LoopConfig(params=p, source=ConstantSource(10e-9), duration=5.5))
    M = int(5.0 * p.fclk)
    k = res.settle_index
    stream = res.stream[k:k + M]
    est = running_estimate(stream, p.ip_eff, p.in_eff, tol=0.05)
    full = est.estimate[-1]
    after = est.estimate[M // 256 - 1:]
    ok = stream.M == M and bool(np.all(np.abs(after / full - 1) <= 0.05))
    verdict(7, ok, f"running estimate within 5% from sample {est.settle_index} (limit M/256 = {M // 256}), "
                   f"worst after T/256 {100 * np.max(np.abs(after / full - 1)):.2f}%")
    assert ok


def test_microdisc_transient(verdict):
    g = ElectrodeGeometry(a=25e-6)
    long_err = float(np.max(np.abs(microdisc_f(np.logspace(4, 7, 20)) - 1)))
    tau_s = np.logspace(-7, -4, 20)
    t_s = tau_s * g.a**2 / (4 * g.D)
    short_err = float(np.max(np.abs(microdisc_transient(g, 1.0, t_s) / cottrell_disc(g, 1.0, t_s) - 1)))
    tau = np.logspace(-1.3, 1.3, 20)
    t = tau * g.a**2 / (4 * g.D)
    clean = fit_transient(t, microdisc_transient(g, 2.0, t), g.a, D0=1e-9, c0=1.0)
    rt = max(abs(clean.D / g.D - 1), abs(clean.c / 2.0 - 1))
    oracle = fit_transient(t, limiting_current(g, 1.0) * fd_oracle.disc_transient(tau), g.a, D0=1e-9, c0=2.0)
    d_err = abs(oracle.D / g.D - 1)
    ok = long_err < 0.01 and short_err < 0.02 and rt < 1e-3 and d_err < 0.05
    verdict(8, ok, f"transient: long-time error {100 * long_err:.3f}%, Cottrell error {100 * short_err:.3f}%, "
                   f"round trip {100 * rt:.2e}% (< 0.1%), D from diffusion oracle {100 * d_err:.2f}% (< 5%)")
    assert ok


def test_glucose_round_trip(verdict, tmp_path):
    out = tmp_path / "glucose"
    code = main(["glucose-cal", "--out", str(out), "--set", "experiment.blank_noise=0",
                 "--set", "experiment.reading_noise=0", "--set", "experiment.interferent=0"])
    fit = summary(out / "glucose_fit.csv")
    slope = fit["slope_upper_A_per_mM"]
    ok = (code == 0 and abs(slope / 0.3e-9 - 1) <= 0.01 and math.isfinite(fit["lod_mM"]) and fit["lod_mM"] > 0
          and fit["interferent_rel_error"] == 0.0)
    verdict(9, ok, f"glucose: upper slope {slope * 1e9:.4f} nA/mM (0.3 +- 1%), LoD {fit['lod_mM']:.3f} mM (3 sigma), "
                   f"interferent-free relative error {fit['interferent_rel_error']:.1e}")
    assert ok


def test_multidie_robustness(verdict, tmp_path):
    assert main(["multidie", "--out", str(tmp_path / "a")]) == 0
    sigma = summary(tmp_path / "a" / "multidie_summary.csv")["mean_normalized_sigma"]
    assert main(["multidie", "--out", str(tmp_path / "b"), "--set", "experiment.spread=0",
                 "--set", "experiment.output_spread=0"]) == 0
    with open(tmp_path / "b" / "multidie.csv", newline="") as fh:
        zero = [float(r["sigma_A"]) for r in csv.DictReader(fh)]
    ok = 0.03 <= sigma <= 0.06 and all(s == 0.0 for s in zero)
    verdict(10, ok, f"multidie: mean normalized sigma {100 * sigma:.2f}% (3-6%), zero spread sigma {max(zero)}")
    assert ok
