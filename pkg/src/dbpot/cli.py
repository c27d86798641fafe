"""Command-line front end.

    dbpot <command> --config <path|preset> --out <dir> [--set key=value ...] [--seed n]

Every command writes CSV files, the resolved configuration
(config_snapshot.ini) and run_manifest.json into the output directory.
Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, freqmodel
from .config import (ConfigError, Experiment, REQUIRED, apply_overrides, circuit_params, electrode,
                     load_config, randles_cell, snapshot)
from .electrochem import (CalibrationCurve, ElectrodeGeometry, FitError, ferrocyanide_current,
                          fit_transient, fit_two_segments)
from .fidigota import ParameterError, code_for_current
from .loopsim import (ConstantSource, FerroSource, GlucoseSource, LoopConfig, Range, SimulationError,
                      TransientSource, current_sweep, expected_output_sigma, linear_fit,
                      model_load_config, multidie_montecarlo, pick_range, probe_frequencies,
                      run_chrono, run_zero_input, small_signal_probe)
from .pulses import (StreamFormatError, decode, dynamic_range, noise_rms, psd_welch, pulse_width_trace,
                     read_stream, running_estimate, window_decode, write_stream)

COMMANDS = ("bode", "noise", "chrono", "ferro-sweep", "glucose-cal", "multidie", "decode", "fit")
DEFAULT_PRESET = {"ferro-sweep": "ferro_sweep", "glucose-cal": "glucose"}


@dataclass
class ExperimentSpec:
    name: str
    config: str
    out: Path
    overrides: list = field(default_factory=list)
    seed: int | None = None
    stream: str | None = None
    samples: str | None = None

    def __post_init__(self):
        if self.name not in COMMANDS:
            raise ConfigError(f"unknown command {self.name!r}")
        self.out = Path(self.out)


@dataclass
class RunManifest:
    command: str
    seed: int
    version: str
    files: list
    wall_s: float
    snapshot: str = "config_snapshot.ini"

    def write(self, out: Path):
        missing = [f for f in self.files if not (out / f).exists()]
        if missing:
            raise RuntimeError(f"manifest lists missing files: {missing}")
        (out / "run_manifest.json").write_text(json.dumps(self.__dict__, indent=2) + "\n")


class _Run:
    """Shared state of one command: config, experiment section, outputs."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.cp = load_config(spec.config)
        apply_overrides(self.cp, spec.overrides)
        self.exp = Experiment(self.cp)
        if spec.seed is not None:
            self.exp.sec["seed"] = str(spec.seed)
        self.seed = self.exp.int("seed", 0)
        if spec.stream is not None:
            self.exp.sec["stream"] = str(spec.stream)
        if spec.samples is not None:
            self.exp.sec["samples"] = str(spec.samples)
        self.out = spec.out
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.out}: {exc}") from None
        self.files = []
        self.t_start = time.perf_counter()

    def csv(self, name, header, rows):
        with open(self.out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files.append(name)

    def text(self, name, writer):
        writer(self.out / name)
        self.files.append(name)

    def loop(self, label=None, **kw):
        return LoopConfig(params=circuit_params(self.cp, label), cell=randles_cell(self.cp), seed=self.seed, **kw)

    def finish(self):
        (self.out / "config_snapshot.ini").write_text(snapshot(self.cp))
        self.files.append("config_snapshot.ini")
        m = RunManifest(self.spec.name, self.seed, __version__, list(self.files),
                        round(time.perf_counter() - self.t_start, 3))
        m.write(self.out)
        return m


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _ranges(run: _Run, duration):
    out = []
    for label, imax in run.exp.ranges():
        out.append(Range(label, imax, run.loop(label, duration=duration)))
    return out


# --------------------------------------------------------------------------
# commands


def cmd_bode(spec: ExperimentSpec):
    run = _Run(spec)
    labels = run.exp.strs("supplies", ["base"])
    frac = run.exp.float("amplitude_fraction", 0.125)
    per_decade = run.exp.int("per_decade", 5)
    n_freq = run.exp.int("n_freq", 13)
    min_dur = run.exp.float("min_duration", 1.0)
    summary = []
    for label in labels:
        cfg = run.loop(label)
        p = cfg.params
        tf = freqmodel.stf(p, cfg.model_CL())
        f = np.logspace(-1, math.log10(0.5 / p.T0), 200)
        mag, ph = tf.bode(f)
        rows = [(0.0, 20 * math.log10(tf.dc), 0.0)] + list(zip(f, mag, ph))
        run.csv(f"bode_model_{label}.csv", ["f_hz", "mag_db", "phase_deg"], rows)
        sim_rows, errs = [], []
        for fs in probe_frequencies(p, per_decade, n_freq):
            pt = small_signal_probe(cfg, fs, frac * p.Ion, min_duration=min_dur)
            sim_rows.append((fs, 20 * math.log10(pt.mag), math.degrees(np.angle(pt.H)),
                             20 * math.log10(abs(pt.model)), pt.error_db, pt.valid))
            if pt.valid:
                errs.append(abs(pt.error_db))
        run.csv(f"bode_sim_{label}.csv", ["f_hz", "mag_db", "phase_deg", "model_mag_db", "error_db", "valid"],
                sim_rows)
        summary.append((label, tf.dc, freqmodel.loop_gain(p, cfg.model_CL()), max(errs) if errs else float("nan")))
    run.csv("bode_summary.csv", ["supply", "stf_dc_s_per_A", "loop_gain", "max_abs_error_db"], summary)
    return run.finish()


def noise_experiment(cfg: LoopConfig, runs: int):
    """Zero-input streams, their averaged Welch PSD and the model on the same grid."""
    p = cfg.params
    streams = run_zero_input(cfg, runs)
    psds = []
    for s in streams:
        x = pulse_width_trace(s, cfg.ip_dec, cfg.in_dec, p.Ion, p.T0)
        f, P = psd_welch(x, p.fclk)
        psds.append(P)
    P = np.mean(psds, axis=0)
    keep = (f > 0) & (f <= 0.5 / p.T0)
    spec = freqmodel.output_noise_spectrum(p, cfg.model_CL(), f[keep])
    return streams, f[keep], P[keep], spec


def lowest_decade_slope(f, psd):
    """dB/decade over the lowest resolved decade, skipping the first bin (window leakage)."""
    f0 = f[1]
    return freqmodel.loglog_slope(f, 10 * np.log10(psd), f0, 10 * f0)


def cmd_noise(spec: ExperimentSpec):
    run = _Run(spec)
    label = run.exp.str("supply", "base")
    base = run.loop(label, duration=run.exp.float("duration", 10.0),
                    input_noise=run.exp.bool("input_noise", True))
    cfg = model_load_config(base, run.exp.float("load_c", base.cell.Cp))
    streams, f, P, model = noise_experiment(cfg, run.exp.int("runs", 8))
    run.csv("noise_model.csv", ["f_hz", "psd_total", "psd_quant", "psd_shot"],
            zip(f, model.total, model.quant, model.shot))
    run.csv("noise_sim.csv", ["f_hz", "psd_sim"], zip(f, P))
    p = cfg.params
    sim_power = float(np.trapezoid(P, f))
    model_power = model.inband_power()
    rms = noise_rms(streams, cfg.ip_dec, cfg.in_dec)
    i_max = max(p.ip_eff, p.in_eff)
    run.csv("noise_summary.csv", ["metric", "value"], [
        ("inband_power_model_s2", model_power),
        ("inband_power_sim_s2", sim_power),
        ("power_ratio_sim_over_model", sim_power / model_power),
        ("low_decade_slope_db_per_dec", lowest_decade_slope(f, P)),
        ("noise_rms_A", rms),
        ("dynamic_range_db", dynamic_range(i_max, rms) if rms > 0 else float("inf")),
    ])
    return run.finish()


def _chrono_source(run: _Run):
    kind = run.exp.str("source", "constant")
    if kind == "constant":
        return ConstantSource(run.exp.float("current", REQUIRED))
    conc = run.exp.float("concentration", REQUIRED)
    if kind == "ferro":
        return FerroSource(electrode(run.cp), conc)
    if kind == "transient":
        return TransientSource(electrode(run.cp), conc, run.exp.float("t_step", -1.0))
    if kind == "glucose":
        return GlucoseSource(conc)
    raise ConfigError(f"[experiment] source = {kind!r}; use constant, ferro, transient or glucose")


def cmd_chrono(spec: ExperimentSpec):
    run = _Run(spec)
    src = _chrono_source(run)
    cfg = run.loop(run.exp.str("supply", "base"), duration=run.exp.float("duration", 1.0), source=src)
    cal = run.exp.str("cal", "auto")
    if cal == "auto":
        t = np.linspace(cfg.params.Tclk, cfg.duration, 64)
        code = code_for_current(cfg.params, float(np.max(np.abs(src(t)))), run.exp.float("headroom", 2.0))
    else:
        code = run.exp.int("cal")
    cfg = replace(cfg, params=replace(cfg.params, cal_p=code, cal_n=code))
    res = run_chrono(cfg)
    every = max(1, run.exp.int("trace_every", 10))
    run.csv("chrono_trace.csv", ["t_s", "v_node_V"], zip(res.t[::every], res.v_node[::every]))
    run.text("chrono_stream.txt", lambda path: write_stream(res.stream, path))
    d = res.decoded
    run.csv("chrono_summary.csv", ["setpoint_A", "decoded_A", "p", "n", "true_A", "settle_s", "cal"],
            [(float(src(np.array([cfg.duration]))[0]), d.i_f, d.p, d.n, res.i_true, res.settle_time, code)])
    return run.finish()


def cmd_ferro_sweep(spec: ExperimentSpec):
    run = _Run(spec)
    geom = electrode(run.cp)
    radii = run.exp.floats("radii", [geom.a])
    concs = run.exp.floats("concentrations", REQUIRED)
    i_min = run.exp.float("i_min", 0.0)
    i_max = run.exp.float("i_max", math.inf)
    points = []
    for a in radii:
        g = ElectrodeGeometry(a=a, n=geom.n, D=geom.D)
        for c in concs:
            i = ferrocyanide_current(g, c)
            if i_min <= i <= i_max:
                points.append((a, c, FerroSource(g, c)))
    if not points:
        raise ConfigError("[experiment] no setpoints: concentrations/radii give no current in range")
    ranges = _ranges(run, run.exp.float("duration", 0.5))
    res = current_sweep(ranges, [s.level() for _, _, s in points], run.exp.float("headroom", 2.0),
                        sources=[s for _, _, s in points])
    run.csv("ferro_sweep.csv", ["radius_m", "conc_mM", "setpoint_A", "decoded_A", "p", "n", "supply", "cal"],
            [(a, c, r.setpoint, r.decoded, r.p, r.n, r.label, r.cal) for (a, c, _), r in zip(points, res)])
    x = [r.setpoint for r in res]
    slope, icpt, r2 = linear_fit(x, [r.decoded for r in res])
    run.csv("ferro_fit.csv", ["slope", "intercept_A", "r_squared", "decades"],
            [(slope, icpt, r2, math.log10(max(x) / min(x)))])
    return run.finish()


@dataclass
class GlucoseCalibration:
    conc: np.ndarray
    readings: np.ndarray
    truth: np.ndarray
    blanks: np.ndarray
    breakpoint: float
    slopes: tuple
    intercepts: tuple
    lod: float
    lsb: float
    interferent: float
    interferent_rel_error: float


def glucose_calibration(run: _Run) -> GlucoseCalibration:
    exp = run.exp
    concs = exp.floats("concentrations", REQUIRED)
    reps = exp.int("replicates", 3)
    lod_ref = exp.float("lod_reference", 0.53)
    bp = exp.str("breakpoint", "20")
    bp_fixed = None if bp == "auto" else float(bp)
    top = max(max(concs), (bp_fixed or 0) + 1, 50.0)
    curve = CalibrationCurve.continuous(
        (lod_ref, bp_fixed or 20.0, top), (exp.float("slope_lower", 0.5e-9), exp.float("slope_upper", 0.3e-9)),
        i0=exp.float("slope_lower", 0.5e-9) * lod_ref, lod=lod_ref)
    i_top = max(GlucoseSource(c, curve).level() for c in concs)
    cfg = run.loop(exp.str("supply", "base"), duration=exp.float("duration", 0.5))
    code = code_for_current(cfg.params, i_top, exp.float("headroom", 2.0))
    cfg = replace(cfg, params=replace(cfg.params, cal_p=code, cal_n=code))
    rng = np.random.default_rng(run.seed)
    reading_noise = exp.float("reading_noise", 0.0)
    blank_noise = exp.float("blank_noise", 0.0)

    def measure(c, interferent=0.0):
        r = run_chrono(replace(cfg, source=GlucoseSource(c, curve, interferent)))
        return r.decoded.i_f, r.i_true, r.decoded.lsb

    xs, ys, ts = [], [], []
    for c in concs:
        y, t, lsb = measure(c)
        for k in range(reps):
            xs.append(c)
            ys.append(y + reading_noise * rng.standard_normal())
            ts.append(t)
    try:
        bp_fit, slopes, icpts = fit_two_segments(xs, ys, bp_fixed)
    except ValueError as exc:
        raise ConfigError(f"[experiment] glucose calibration: {exc}") from None
    y0, _, lsb = measure(0.0)
    blanks = y0 + blank_noise * rng.standard_normal(exp.int("blanks", 10))
    sigma = max(float(np.std(blanks, ddof=1)) if blanks.size > 1 else 0.0, lsb / math.sqrt(12))
    lod = 3 * sigma / slopes[0]
    c_int = exp.float("interferent_conc", 5.0)
    interferent = exp.float("interferent", 0.0)
    base, _, _ = measure(c_int)
    with_int, _, _ = measure(c_int, interferent)
    rel = abs(with_int - base) / abs(base)
    return GlucoseCalibration(np.array(xs), np.array(ys), np.array(ts), blanks, bp_fit, slopes, icpts,
                              lod, lsb, interferent, rel)


def cmd_glucose_cal(spec: ExperimentSpec):
    run = _Run(spec)
    cal = glucose_calibration(run)
    reps = run.exp.int("replicates", 3)
    run.csv("glucose_readings.csv", ["conc_mM", "replicate", "true_A", "decoded_A"],
            [(c, k % reps, t, y) for k, (c, t, y) in enumerate(zip(cal.conc, cal.truth, cal.readings))])
    run.csv("glucose_fit.csv", ["param", "value"], [
        ("breakpoint_mM", cal.breakpoint),
        ("slope_lower_A_per_mM", cal.slopes[0]),
        ("slope_upper_A_per_mM", cal.slopes[1]),
        ("intercept_lower_A", cal.intercepts[0]),
        ("intercept_upper_A", cal.intercepts[1]),
        ("blank_sigma_A", float(np.std(cal.blanks, ddof=1))),
        ("lod_mM", cal.lod),
        ("lod_reference_mM", run.exp.float("lod_reference", 0.53)),
        ("interferent_A", cal.interferent),
        ("interferent_rel_error", cal.interferent_rel_error),
    ])
    return run.finish()


def cmd_multidie(spec: ExperimentSpec):
    run = _Run(spec)
    setpoints = run.exp.floats("setpoints", REQUIRED)
    if not setpoints:
        raise ConfigError("[experiment] setpoints is empty")
    ranges = _ranges(run, run.exp.float("duration", 0.5))
    configs = [pick_range(ranges, sp).cfg for sp in setpoints]
    spread = run.exp.float("spread", 0.10)
    out_spread = run.exp.float("output_spread", spread)
    headroom = run.exp.float("headroom", 2.0)
    res = multidie_montecarlo(configs, setpoints, run.exp.int("n_dice", 5), spread, out_spread,
                              seed=run.seed, headroom=headroom)
    run.csv("multidie.csv", ["setpoint_A", "cal", "true_mean_A", "mean_A", "sigma_A", "min_A", "max_A",
                             "normalized_sigma"],
            [(r.setpoint, r.cal, r.true_mean, r.mean, r.sigma, r.min, r.max, r.normalized_sigma) for r in res.rows])
    run.csv("multidie_summary.csv", ["metric", "value"], [
        ("mean_normalized_sigma", res.mean_normalized_sigma),
        ("expected_normalized_sigma", expected_output_sigma([r.cal for r in res.rows], out_spread)),
    ])
    return run.finish()


def cmd_decode(spec: ExperimentSpec):
    run = _Run(spec)
    path = run.exp.str("stream", REQUIRED)
    stream = read_stream(path)
    p = circuit_params(run.cp, run.exp.str("supply", "base"))
    ip, in_ = run.exp.float("ip", p.ip_eff), run.exp.float("in", p.in_eff)
    window = run.exp.int("window", 0) or max(1, stream.M // 256)
    start, i_f, pc, nc = window_decode(stream, ip, in_, window)
    run.csv("decode_windows.csv", ["window_start_s", "i_f_A", "p", "n"], zip(start, i_f, pc, nc))
    est = running_estimate(stream, ip, in_, run.exp.float("tol", 0.05))
    idx = np.arange(window, stream.M + 1, window) - 1
    run.csv("decode_running.csv", ["t_s", "i_est_A"], zip(est.t[idx], est.estimate[idx]))
    d = decode(stream, ip, in_)
    run.csv("decode_summary.csv", ["i_f_A", "p", "n", "M", "lsb_A", "settle_index", "settle_s", "window"],
            [(d.i_f, d.p, d.n, d.M, d.lsb, est.settle_index, est.settle_time, window)])
    return run.finish()


def read_samples(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"samples file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["t_s", "i_A"]:
        raise ConfigError(f"{path}: header must be t_s,i_A")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return data[:, 0], data[:, 1]


def cmd_fit(spec: ExperimentSpec):
    run = _Run(spec)
    t, i = read_samples(run.exp.str("samples", REQUIRED))
    geom = electrode(run.cp)
    try:
        fit = fit_transient(t, i, geom.a, geom.n, D0=geom.D)
    except ValueError as exc:
        if isinstance(exc, FitError):
            raise
        raise ConfigError(f"samples: {exc}") from None
    run.csv("fit_report.csv", ["param", "value", "stderr"], fit.rows())
    return run.finish()


HANDLERS = {
    "bode": cmd_bode, "noise": cmd_noise, "chrono": cmd_chrono, "ferro-sweep": cmd_ferro_sweep,
    "glucose-cal": cmd_glucose_cal, "multidie": cmd_multidie, "decode": cmd_decode, "fit": cmd_fit,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="dbpot", description="Digital-based potentiostat simulator")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="config file or bundled preset name (default: preset of the command)")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config value, e.g. circuit.ion=5e-9 or experiment.duration=0.5")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--stream", help="stream file for the decode command")
    ap.add_argument("--samples", help="t_s,i_A CSV for the fit command")
    ap.add_argument("--version", action="version", version=f"dbpot {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = args.config or DEFAULT_PRESET.get(args.command, args.command)
    try:
        spec = ExperimentSpec(args.command, config, Path(args.out), args.overrides, args.seed,
                              args.stream, args.samples)
        manifest = HANDLERS[args.command](spec)
    except (ConfigError, ParameterError, StreamFormatError) as exc:
        print(f"dbpot: error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, FitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"dbpot: numerical failure: {exc}", file=sys.stderr)
        return 3
    print(f"dbpot {args.command}: wrote {len(manifest.files)} files to {args.out} in {manifest.wall_s:.1f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
