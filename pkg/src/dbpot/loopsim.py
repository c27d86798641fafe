"""Closed-loop simulation of the digital potentiostat around a cell.

One node carries the output-stage current, the load capacitance and the
cell.  Every clock period the output stage injects ip or in (or nothing)
for Tclk, the cell draws its faradaic current plus the current through its
parallel resistance, and the FI-DIGOTA samples vd = Vref - v_node.

Between clock edges the node is linear with constant forcing, so it is
advanced with the exact exponential solution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import freqmodel
from .electrochem import (CalibrationCurve, ElectrodeGeometry, GLUCOSE_DEFAULT, RandlesCell,
                          ferrocyanide_current, glucose_current, microdisc_transient)
from .fidigota import CircuitParams, Digota, new_state
from .pulses import (DecodeResult, PulseStream, decode, pulse_width_trace, running_estimate,
                     tone_projection)


class SimulationError(RuntimeError):
    """The node voltage left any physically meaningful range."""


# --------------------------------------------------------------------------
# current sources drawn by the cell


@dataclass(frozen=True)
class ConstantSource:
    i: float = 0.0

    def level(self):
        return self.i

    def __call__(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.i)


@dataclass(frozen=True)
class FerroSource:
    """Steady-state ferrocyanide oxidation current at a microdisc."""

    geom: ElectrodeGeometry
    c: float

    def level(self):
        return ferrocyanide_current(self.geom, self.c)

    def __call__(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.level())


@dataclass(frozen=True)
class TransientSource:
    """Chronoamperometric transient after a potential step at ``t_step``."""

    geom: ElectrodeGeometry
    c: float
    t_step: float = -1.0

    def level(self):
        return None

    def __call__(self, t):
        return microdisc_transient(self.geom, self.c, np.asarray(t, dtype=float) - self.t_step)


@dataclass(frozen=True)
class GlucoseSource:
    c: float
    cal: CalibrationCurve = GLUCOSE_DEFAULT
    interferent: float = 0.0

    def level(self):
        return glucose_current(self.cal, self.c).current + self.interferent

    def __call__(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.level())


@dataclass(frozen=True)
class SineSource:
    """Offset plus a sinusoidal probe, ``i0 + amp sin(2 pi f t)``."""

    i0: float
    amp: float
    f: float

    def level(self):
        return None

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.i0 + self.amp * np.sin(2 * np.pi * self.f * t)


@dataclass(frozen=True)
class ResistiveLoad:
    """A resistor R to a fixed potential Vs, with an optional capacitor.

    With ``R = rout`` and ``Vs = Vref`` this is the output impedance the
    linear model assumes, which makes simulation and model comparable.
    """

    R: float
    Vs: float
    C: float = 0.0

    def __post_init__(self):
        if not (self.R > 0 and self.C >= 0):
            raise ValueError("ResistiveLoad needs R > 0 and C >= 0")


# --------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class LoopConfig:
    """One closed-loop experiment.

    ``load`` replaces the Randles cell when given.  ``decode_ip`` and
    ``decode_in`` are the currents the decoder assumes (default: the
    configured drive), which differ from the true drive in mismatch runs.
    ``input_noise`` adds the input-stage shot noise to vd; ``dither`` starts
    the ramps at a random phase.
    """

    params: CircuitParams = field(default_factory=CircuitParams)
    cell: RandlesCell = field(default_factory=RandlesCell)
    source: object = field(default_factory=ConstantSource)
    Vref: float | None = None
    duration: float = 1.0
    seed: int = 0
    load: ResistiveLoad | None = None
    input_noise: bool = False
    dither: bool = False
    decode_ip: float | None = None
    decode_in: float | None = None
    v_abort: float = 1e3

    @property
    def vref(self):
        return self.params.Vdd / 2 if self.Vref is None else self.Vref

    @property
    def n_ticks(self):
        return int(math.floor(self.duration * self.params.fclk + 1e-9))

    @property
    def node_capacitance(self):
        return self.params.CL + (self.load.C if self.load is not None else self.cell.Cp)

    @property
    def ip_dec(self):
        return self.params.ip_eff if self.decode_ip is None else self.decode_ip

    @property
    def in_dec(self):
        return self.params.in_eff if self.decode_in is None else self.decode_in

    def validate(self):
        bad = self.params.validate()
        if self.duration < 10 * self.params.T0:
            bad.append(f"duration must be at least 10 T0 ({10 * self.params.T0:g} s)")
        if not 0 < self.vref < self.params.Vdd:
            bad.append(f"Vref={self.vref:g} must lie in (0, Vdd)")
        return bad

    def model_CL(self):
        """Load capacitance to use in the linear model for this loop."""
        return self.node_capacitance


@dataclass
class ChronoResult:
    stream: PulseStream
    v_node: np.ndarray
    i_cell: np.ndarray
    decoded: DecodeResult
    settle_time: float
    settle_index: int
    q_injected: float
    q_drawn: float

    @property
    def t(self):
        return np.arange(1, self.stream.M + 1) / self.stream.fclk

    @property
    def i_true(self):
        """Mean current drawn by the cell over the decoded (settled) span."""
        return float(np.mean(self.i_cell[self.settle_index:]))


# --------------------------------------------------------------------------
# simulation core


def _simulate(cfg: LoopConfig, source=None):
    """Run the loop; returns (codes, v_node, i_cell, q_injected, q_drawn)."""
    problems = cfg.validate()
    if problems:
        from .fidigota import ParameterError
        raise ParameterError(problems)
    p = cfg.params
    source = cfg.source if source is None else source
    rng = np.random.default_rng(cfg.seed)
    core = Digota(p)
    state = new_state(p, rng.uniform(0.0, 1.0) if cfg.dither else 0.0)

    N = cfg.n_ticks
    dt = p.Tclk
    C = cfg.node_capacitance
    vref = cfg.vref
    if cfg.load is not None:
        R, v_leak = cfg.load.R, cfg.load.Vs
    else:
        R, v_leak = cfg.cell.Rp, vref

    # faradaic current sampled at mid-period (piecewise-constant forcing)
    t_mid = (np.arange(N) + 0.5) * dt
    level = source.level() if hasattr(source, "level") else None
    i_src = np.full(N, level, dtype=float) if level is not None else np.asarray(source(t_mid), dtype=float)

    if cfg.input_noise:
        sigma = math.sqrt(freqmodel.input_noise_psd(p) * p.fclk / 2.0)
        vn = (sigma * rng.standard_normal(N)).tolist()
    else:
        vn = None

    if math.isinf(R):
        decay, gain = 1.0, dt / C
    else:
        decay = math.exp(-dt / (R * C))
        gain = -math.expm1(-dt / (R * C)) * R

    ip, in_ = p.ip_eff, p.in_eff
    rail = p.rail
    vabort = cfg.v_abort
    codes = np.empty(N, dtype=np.int8)
    v_node = np.empty(N)
    i_cell = np.empty(N)
    step = core.tick
    v = vref
    q_inj = 0.0
    q_drawn = 0.0
    isrc = i_src.tolist()
    for k in range(N):
        vd = vref - v
        if vn is not None:
            vd += vn[k]
        drive = step(state, vd)
        if drive == 1:
            iout = ip if v < rail else 0.0
        elif drive == -1:
            iout = -in_ if v > 0.0 else 0.0
        else:
            iout = 0.0
        codes[k] = drive
        i_f = isrc[k]
        v_old = v
        if math.isinf(R):
            v = v + (iout - i_f) * gain
        else:
            v = v_leak + (v - v_leak) * decay + (iout - i_f) * gain
        if not math.isfinite(v) or abs(v) > vabort:
            raise SimulationError(
                f"node voltage {v:g} V out of range at t={(k + 1) * dt:g} s "
                f"(source {i_f:g} A, drive limit {max(ip, in_):g} A)")
        q = iout * dt
        drawn = q - C * (v - v_old)
        q_inj += q
        q_drawn += drawn
        v_node[k] = v
        i_cell[k] = drawn / dt
    return codes, v_node, i_cell, q_inj, q_drawn


def _settle_index(stream: PulseStream, ip: float, in_: float, rtol: float = 0.02) -> int:
    """Prefix length after which the running decode stays within 2 % of the final one."""
    est = running_estimate(stream, ip, in_, tol=0.0).estimate
    final = est[-1]
    band = max(rtol * abs(final), 10.0 * max(ip, in_) / stream.M)
    idx = np.flatnonzero(np.abs(est - final) > band)
    return 0 if idx.size == 0 else min(int(idx[-1]) + 1, stream.M)


def run_chrono(cfg: LoopConfig) -> ChronoResult:
    """Run one chronoamperometric acquisition and decode the settled part.

    The decode skips the initial settling transient but always keeps at
    least the second half of the record.
    """
    codes, v_node, i_cell, q_inj, q_drawn = _simulate(cfg)
    stream = PulseStream(codes, cfg.params.fclk)
    settle = _settle_index(stream, cfg.ip_dec, cfg.in_dec)
    start = min(settle, stream.M // 2)
    decoded = decode(stream[start:], cfg.ip_dec, cfg.in_dec)
    return ChronoResult(stream, v_node, i_cell, decoded, settle / cfg.params.fclk, start, q_inj, q_drawn)


def run_zero_input(cfg: LoopConfig, n_runs: int, seeds: Sequence[int] | None = None) -> list[PulseStream]:
    """Zero-current streams with dithered start phase, one per seed."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    seeds = list(range(cfg.seed, cfg.seed + n_runs)) if seeds is None else list(seeds)
    if len(seeds) != n_runs or len(set(seeds)) != n_runs:
        raise ValueError("need n_runs distinct seeds")
    out = []
    for s in seeds:
        c = replace(cfg, source=ConstantSource(0.0), seed=s, dither=True)
        codes, *_ = _simulate(c)
        out.append(PulseStream(codes, cfg.params.fclk))
    return out


def model_load_config(cfg: LoopConfig, C: float | None = None) -> LoopConfig:
    """Replace the cell by the load the linear model assumes: rout to Vref."""
    C = cfg.cell.Cp if C is None else C
    return replace(cfg, load=ResistiveLoad(cfg.params.rout, cfg.vref, C))


# --------------------------------------------------------------------------
# small-signal probe


@dataclass
class ProbePoint:
    f: float
    H: complex
    model: complex
    amplitude: float
    valid: bool

    @property
    def mag(self):
        return abs(self.H)

    @property
    def error_db(self):
        return 20 * math.log10(abs(self.H) / abs(self.model))


def probe_frequencies(params: CircuitParams, per_decade: int = 5, n: int = 13):
    """Log-spaced probe grid ending at f0/4, ``per_decade`` points per decade."""
    return 0.25 / params.T0 * 10.0 ** (-np.arange(n)[::-1] / per_decade)


def _saturated(codes: np.ndarray, window: int) -> bool:
    active = np.abs(codes.astype(np.int64))
    run = np.convolve(active, np.ones(window, dtype=np.int64), mode="valid")
    return bool(np.any(run >= window))


def small_signal_probe(cfg: LoopConfig, f_sig: float, amplitude: float, min_cycles: int = 20,
                       min_duration: float = 1.0, settle: float = 0.02) -> ProbePoint:
    """Measure the current-to-pulse-width transfer at ``f_sig``.

    A sinusoid of ``amplitude`` amps rides on the configured current and the
    pulse-width trace is projected onto it over an integer number of
    cycles.  ``f_sig = 0`` applies a step of ``amplitude`` instead and
    compares the mean shift.  A point is invalid when the output stage is
    stuck on for two self-oscillation periods in a row.
    """
    p = cfg.params
    if f_sig > 0.25 / p.T0 * (1 + 1e-9):
        raise ValueError("probe frequency must not exceed f0/4")
    i0 = cfg.source.level() if hasattr(cfg.source, "level") and cfg.source.level() is not None else 0.0
    n_settle = int(round(settle * p.fclk))
    if f_sig > 0:
        n_cyc = max(min_cycles, math.ceil(f_sig * min_duration))
        n_meas = int(round(n_cyc / f_sig * p.fclk))
        src = SineSource(i0, amplitude, f_sig)
    else:
        n_meas = int(round(min_duration * p.fclk))
        src = ConstantSource(i0 + amplitude)
    run = replace(cfg, source=src, duration=(n_settle + n_meas) / p.fclk + 1e-12)
    codes, *_ = _simulate(run)
    stream = PulseStream(codes[n_settle:n_settle + n_meas], p.fclk)
    x = pulse_width_trace(stream, cfg.ip_dec, cfg.in_dec, p.Ion, p.T0)
    model_tf = freqmodel.stf(p, cfg.model_CL())
    if f_sig > 0:
        # the trace starts n_settle periods into the sine, so shift the phase back
        X = tone_projection(x, p.fclk, f_sig) * np.exp(-2j * np.pi * f_sig * n_settle / p.fclk)
        H = X / (-1j * amplitude)
        model = complex(model_tf.freq(f_sig))
    else:
        base = replace(cfg, source=ConstantSource(i0), duration=run.duration)
        c0, *_ = _simulate(base)
        x0 = pulse_width_trace(PulseStream(c0[n_settle:n_settle + n_meas], p.fclk), cfg.ip_dec, cfg.in_dec, p.Ion, p.T0)
        H = complex((x.mean() - x0.mean()) / amplitude)
        model = complex(model_tf.dc)
    valid = not _saturated(stream.codes, int(round(2 * p.T0 * p.fclk)))
    return ProbePoint(float(f_sig), H, model, amplitude, valid)


# --------------------------------------------------------------------------
# multi-die Monte Carlo

DIE_PARAMS = ("gm", "r0", "Cfi", "Icm", "T0")


@dataclass
class DieSample:
    params: CircuitParams
    unit_p: np.ndarray
    unit_n: np.ndarray

    def at_codes(self, base: CircuitParams, cal_p: int, cal_n: int) -> CircuitParams:
        """Die parameters at the given calibration codes.

        Each output rail is an array of 256 unit devices; code c enables
        units 0..c.  Mismatch therefore averages down at higher codes and is
        consistent between codes on the same die.
        """
        kp = float(np.mean(self.unit_p[: cal_p + 1]))
        kn = float(np.mean(self.unit_n[: cal_n + 1]))
        return replace(self.params, ip=base.ip * kp, in_=base.in_ * kn, cal_p=cal_p, cal_n=cal_n)


def expected_output_sigma(codes: Sequence[int], output_spread: float) -> float:
    """Mean relative σ of the output-stage gain over the given codes.

    Uses the unit-lognormal mean and variance; this is the readout σ the
    Monte Carlo should approach for many dice.
    """
    m = math.exp(output_spread**2 / 2)
    sd = m * math.sqrt(math.expm1(output_spread**2))
    return float(np.mean([sd / m / math.sqrt(c + 1) for c in codes]))


@dataclass
class SetpointStats:
    setpoint: float
    cal: int
    true_mean: float
    mean: float
    sigma: float
    min: float
    max: float
    decoded: np.ndarray

    @property
    def normalized_sigma(self):
        return self.sigma / abs(self.mean) if self.mean else 0.0


@dataclass
class MultidieResult:
    rows: list[SetpointStats]

    @property
    def mean_normalized_sigma(self):
        return float(np.mean([r.normalized_sigma for r in self.rows]))


def multidie_montecarlo(configs: Sequence[LoopConfig], setpoints: Sequence[float], n_dice: int = 5,
                        spread: float = 0.10, output_spread: float | None = None,
                        seed: int = 0, headroom: float = 2.0) -> MultidieResult:
    """Decoded-current statistics over simulated dice.

    ``configs[k]`` is the operating point (supply preset) used for
    ``setpoints[k]``.  ``spread`` is the lognormal σ of the die-level
    small-signal parameters, ``output_spread`` (default: ``spread``) the σ
    of each output-stage unit device.  The decoder always assumes the
    nominal drive, so output-stage mismatch appears as a gain error.  All
    dice share one measurement seed, so with zero spread every die reads
    the same value.
    """
    from .fidigota import code_for_current

    if n_dice < 5:
        raise ValueError("need at least 5 dice")
    if spread < 0 or (output_spread is not None and output_spread < 0):
        raise ValueError("spread must be non-negative")
    if len(configs) != len(setpoints):
        raise ValueError("one config per setpoint")
    output_spread = spread if output_spread is None else output_spread
    rng = np.random.default_rng(seed)
    # the same physical dice are measured at every supply preset
    die_draws = [(rng.standard_normal(len(DIE_PARAMS)), rng.standard_normal(256), rng.standard_normal(256))
                 for _ in range(n_dice)]
    rows = []
    for cfg, sp in zip(configs, setpoints):
        base = cfg.params
        cal = code_for_current(base, sp, headroom)
        nominal = replace(base, cal_p=cal, cal_n=cal)
        vals, trues = [], []
        for g, up, un in die_draws:
            over = {name: getattr(base, name) * math.exp(spread * g[j]) for j, name in enumerate(DIE_PARAMS)}
            die = DieSample(replace(base, **over), np.exp(output_spread * up), np.exp(output_spread * un))
            dp = die.at_codes(base, cal, cal)
            run = replace(cfg, params=dp, source=ConstantSource(sp),
                          decode_ip=nominal.ip_eff, decode_in=nominal.in_eff)
            res = run_chrono(run)
            vals.append(res.decoded.i_f)
            trues.append(res.i_true)
        vals = np.array(vals)
        # identical readings give exactly zero rather than rounding residue
        sigma = 0.0 if np.ptp(vals) == 0 else float(vals.std(ddof=1))
        rows.append(SetpointStats(sp, cal, float(np.mean(trues)), float(vals.mean()), sigma,
                                  float(vals.min()), float(vals.max()), vals))
    return MultidieResult(rows)


# --------------------------------------------------------------------------
# multi-range sweeps


@dataclass(frozen=True)
class Range:
    """A supply preset used for currents up to ``i_max``."""

    label: str
    i_max: float
    cfg: LoopConfig


def pick_range(ranges: Sequence[Range], i: float) -> Range:
    for r in sorted(ranges, key=lambda r: r.i_max):
        if abs(i) <= r.i_max * (1 + 1e-9):
            return r
    raise ValueError(f"{i:g} A is above every configured range")


def ranged_config(ranges: Sequence[Range], i: float, headroom: float = 2.0) -> LoopConfig:
    """Loop config for current ``i``: the smallest range, trimmed for ``i``."""
    from .fidigota import code_for_current

    r = pick_range(ranges, i)
    code = code_for_current(r.cfg.params, i, headroom)
    return replace(r.cfg, params=replace(r.cfg.params, cal_p=code, cal_n=code))


@dataclass
class SweepPoint:
    setpoint: float
    decoded: float
    true: float
    p: int
    n: int
    label: str
    cal: int


def current_sweep(ranges: Sequence[Range], currents: Sequence[float], headroom: float = 2.0,
                  sources: Sequence[object] | None = None) -> list[SweepPoint]:
    """Run one chrono acquisition per current, each on its own range."""
    out = []
    for k, i in enumerate(currents):
        cfg = ranged_config(ranges, i, headroom)
        src = ConstantSource(i) if sources is None else sources[k]
        res = run_chrono(replace(cfg, source=src))
        out.append(SweepPoint(float(i), res.decoded.i_f, res.i_true, res.decoded.p, res.decoded.n,
                              pick_range(ranges, i).label, cfg.params.cal_p))
    return out


def linear_fit(x, y):
    """Least-squares line; returns (slope, intercept, r_squared)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)
