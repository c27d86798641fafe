"""Clocked behavioral model of the floating-inverter digital OTA.

Two ramp integrators charge at a common-mode slope that the differential
input tilts in opposite directions.  Buffers compare each ramp against a
threshold, D flip-flops sample the buffer outputs on every clock edge, and
the sampled pair selects the three-state output:

    (q1, q2) = (0, 1) -> P, source ip
    (q1, q2) = (1, 0) -> N, sink in
    (0, 0) or (1, 1)  -> Z

When both flip-flops agree the common-mode compensation restarts the ramps
in the opposite direction.  With no input the machine alternates between
(0, 0) and (1, 1) with period T0.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace

import numpy as np


class ParameterError(ValueError):
    """Invalid parameter set; ``problems`` lists the offending fields."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid parameters: " + "; ".join(self.problems))


class OutputDrive(enum.IntEnum):
    N = -1
    Z = 0
    P = 1

    @property
    def char(self):
        return self.name


@dataclass(frozen=True)
class CircuitParams:
    """Behavioral and small-signal parameters of the FI-DIGOTA.

    Defaults are the 0.4 V operating point.  ``ip`` and ``in_`` are the
    output-stage currents at calibration code 1; the trimmed values are
    ``ip_eff`` and ``in_eff``.  ``CL`` is the parasitic capacitance at the
    output node when nothing else is attached.  ``Vth_buff=None`` means
    Vdd/2 and ``v_rail=None`` means the output stage is supplied from Vdd.
    """

    Vdd: float = 0.4
    fclk: float = 50e3
    T0: float = 103e-6
    gm: float = 61e-9
    r0: float = 89e9
    Cfi: float = 1.9e-15
    Icm: float = 0.8e-12
    Ion: float = 8.1e-9
    ip: float = 8.1e-9
    in_: float = 8.1e-9
    rout: float = 102e3
    CL: float = 10e-12
    Vth_buff: float | None = None
    cal_p: int = 1
    cal_n: int = 1
    v_rail: float | None = None

    @property
    def Tclk(self):
        return 1.0 / self.fclk

    @property
    def vth(self):
        return self.Vdd / 2 if self.Vth_buff is None else self.Vth_buff

    @property
    def rail(self):
        return self.Vdd if self.v_rail is None else self.v_rail

    @property
    def ip_eff(self):
        return self.ip * code_strength(self.cal_p)

    @property
    def in_eff(self):
        return self.in_ * code_strength(self.cal_n)

    def validate(self):
        """Return a list of human-readable problems (empty when valid)."""
        bad = []
        for name in ("Vdd", "fclk", "T0", "gm", "r0", "Cfi", "Icm", "Ion", "ip", "in_", "rout", "CL"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                bad.append(f"{name} must be a positive finite number (got {v!r})")
        if bad:
            return bad
        if self.Tclk >= self.T0:
            bad.append(f"Tclk={self.Tclk:g} must be shorter than T0={self.T0:g}")
        if not 0 < self.vth < self.Vdd:
            bad.append(f"Vth_buff={self.vth:g} must lie in (0, Vdd)")
        for name in ("ip", "in_"):
            ratio = getattr(self, name) / self.Ion
            if not 0.1 <= ratio <= 10:
                bad.append(f"{name} must be within 10x of Ion (ratio {ratio:.3g})")
        for name in ("cal_p", "cal_n"):
            code = getattr(self, name)
            if not (isinstance(code, (int, np.integer)) and 0 <= code <= 255):
                bad.append(f"{name} must be an integer in [0, 255] (got {code!r})")
        if not self.rail > 0:
            bad.append("v_rail must be positive")
        return bad

    def check(self):
        problems = self.validate()
        if problems:
            raise ParameterError(problems)
        return self


def param_names():
    return [f.name for f in fields(CircuitParams)]


def code_strength(code: int) -> float:
    """Linear code-to-strength map, 1 at code 1 and 1/256 of full scale at 0."""
    if not 0 <= code <= 255:
        raise ValueError(f"calibration code {code} outside [0, 255]")
    return (code + 1) / 2.0


def trim_output_stage(params: CircuitParams, cal_p: int, cal_n: int | None = None) -> CircuitParams:
    """Set the 8-bit calibration words of the pull-up and pull-down rails."""
    cal_n = cal_p if cal_n is None else cal_n
    for code in (cal_p, cal_n):
        if not (isinstance(code, (int, np.integer)) and 0 <= code <= 255):
            raise ValueError(f"calibration code {code!r} outside [0, 255]")
    return replace(params, cal_p=int(cal_p), cal_n=int(cal_n))


def code_for_current(params: CircuitParams, i_max: float, headroom: float = 2.0) -> int:
    """Smallest symmetric code whose drive covers ``headroom * i_max`` on both rails."""
    base = min(params.ip, params.in_)
    need = headroom * abs(i_max) / base
    code = max(0, math.ceil(2 * need - 1))
    if code > 255:
        raise ValueError(f"{i_max:g} A is beyond the output stage range")
    return code


def calibrate_slopes(params: CircuitParams) -> float:
    """Common-mode charging current that makes the idle period equal T0.

    Each half period the ramps travel from the restart level to the buffer
    threshold, a swing of min(Vth, Vdd - Vth); at Vth = Vdd/2 this is
    2 Cfi Vth / T0.  This current only sets timing; the small-signal gain
    keeps using ``params.Icm``.
    """
    swing = min(params.vth, params.Vdd - params.vth)
    return 2.0 * params.Cfi * swing / params.T0


@dataclass
class DigotaState:
    vib1: float = 0.0
    vib2: float = 0.0
    d1: int = 0
    d2: int = 0
    q1: int = 0
    q2: int = 0
    up: bool = True
    t: float = 0.0
    n: int = 0

    @property
    def phase(self):
        return "up" if self.up else "down"

    @property
    def drive(self) -> OutputDrive:
        return drive_of(self.q1, self.q2)


def drive_of(q1: int, q2: int) -> OutputDrive:
    if q1 == 0 and q2 == 1:
        return OutputDrive.P
    if q1 == 1 and q2 == 0:
        return OutputDrive.N
    return OutputDrive.Z


def new_state(params: CircuitParams, phase_offset: float = 0.0) -> DigotaState:
    """Fresh state: ramps at their restart level, phase up, flip-flops cleared.

    ``phase_offset`` in [0, 1) starts both ramps that fraction of the way
    through the first half period; it is used to dither noise runs.
    """
    params.check()
    if not 0.0 <= phase_offset < 1.0:
        raise ValueError("phase_offset must lie in [0, 1)")
    v0 = phase_offset * min(params.vth, params.Vdd - params.vth)
    return DigotaState(vib1=v0, vib2=v0)


class Digota:
    """Precomputed per-parameter constants and the per-clock update.

    Keeping the constants on an object avoids re-deriving them every tick,
    which matters for runs of millions of clock periods.
    """

    def __init__(self, params: CircuitParams):
        self.params = params.check()
        self.vdd = params.Vdd
        self.vth = params.vth
        self.swing = min(params.vth, params.Vdd - params.vth)
        self.icm_eff = calibrate_slopes(params)
        # ramp step per tick at zero input, and its relative tilt per volt
        self.step0 = self.icm_eff / params.Cfi * params.Tclk
        self.tilt = params.gm / (2.0 * params.Icm)
        self.tclk = params.Tclk

    def tick(self, s: DigotaState, vd: float) -> OutputDrive:
        """Advance ``s`` in place by one clock period; return this period's drive."""
        drive = drive_of(s.q1, s.q2)
        dm = self.tilt * vd
        # in the up phase a positive input speeds ramp 2, in the down phase ramp 1
        if s.up:
            r1 = self.step0 * max(0.0, 1.0 - dm)
            r2 = self.step0 * max(0.0, 1.0 + dm)
            s.vib1 = min(self.vdd, s.vib1 + r1)
            s.vib2 = min(self.vdd, s.vib2 + r2)
            if s.vib1 >= self.vth:
                s.d1 = 1
            if s.vib2 >= self.vth:
                s.d2 = 1
        else:
            r1 = self.step0 * max(0.0, 1.0 + dm)
            r2 = self.step0 * max(0.0, 1.0 - dm)
            s.vib1 = max(0.0, s.vib1 - r1)
            s.vib2 = max(0.0, s.vib2 - r2)
            if s.vib1 <= self.vth:
                s.d1 = 0
            if s.vib2 <= self.vth:
                s.d2 = 0
        s.q1, s.q2 = s.d1, s.d2
        s.n += 1
        s.t = s.n * self.tclk
        # common-mode compensation: restart the other ramp direction, keeping
        # the overshoot past the threshold so no time is lost
        if s.up and s.q1 and s.q2:
            carry = min(min(s.vib1, s.vib2) - self.vth, self.swing)
            s.vib1 = s.vib2 = self.vth + self.swing - carry
            s.up = False
        elif not s.up and not s.q1 and not s.q2:
            carry = min(self.vth - max(s.vib1, s.vib2), self.swing)
            s.vib1 = s.vib2 = self.vth - self.swing + carry
            s.up = True
        return drive


def tick(state: DigotaState, vd: float, params: CircuitParams):
    """Functional form of :meth:`Digota.tick`; returns ``(new_state, drive)``."""
    s = replace(state)
    drive = Digota(params).tick(s, vd)
    return s, drive


def run_open_loop(params: CircuitParams, vd, state: DigotaState | None = None) -> np.ndarray:
    """Drive the machine with a sequence of inputs; return drive codes (+1/0/-1)."""
    core = Digota(params)
    s = new_state(params) if state is None else state
    vd = np.asarray(vd, dtype=float)
    out = np.empty(vd.size, dtype=np.int8)
    step = core.tick
    for k, v in enumerate(vd.tolist()):
        out[k] = step(s, v)
    return out
