"""Linearized frequency-domain model of the potentiostat loop.

The loop is a chain of four blocks: the input stage A1(s), the
voltage-to-time conversion Cfi/Icm, the time-to-current conversion
2 Ion/T0 and the output impedance Z2(s).  Everything is expressed as
rational functions in s with coefficients in descending powers, as used by
``numpy.polyval``.

Transfer functions refer to t_q1, the pulse width per self-oscillation
period, so the signal path has units of s/A.  PSDs are one-sided.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fidigota import CircuitParams

Q_E = 1.602176634e-19


@dataclass(frozen=True)
class RationalTF:
    num: np.ndarray
    den: np.ndarray
    units: str = ""

    def __post_init__(self):
        num = np.trim_zeros(np.atleast_1d(np.asarray(self.num, dtype=float)), "f")
        den = np.trim_zeros(np.atleast_1d(np.asarray(self.den, dtype=float)), "f")
        if num.size == 0:
            num = np.zeros(1)
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
            raise ValueError("coefficients must be finite")
        if den.size == 0 or den[-1] == 0:
            raise ValueError("denominator must be nonzero at s=0")
        if num.size > den.size:
            raise ValueError("improper transfer function")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    def __call__(self, s):
        return np.polyval(self.num, s) / np.polyval(self.den, s)

    def freq(self, f):
        return self(2j * np.pi * np.asarray(f, dtype=float))

    @property
    def dc(self):
        return float(self.num[-1] / self.den[-1])

    def poles(self):
        return np.roots(self.den)

    def zeros(self):
        return np.roots(self.num)

    def bode(self, f):
        h = self.freq(f)
        return 20 * np.log10(np.abs(h)), np.degrees(np.angle(h))


@dataclass(frozen=True)
class BlockGains:
    gm_r0: float  # A1(0)
    tau_in: float  # r0 Cfi
    k_v2t: float  # Cfi/Icm
    k_t2i: float  # 2 Ion / T0
    rout: float  # Z2(0)
    tau_out: float  # rout CL

    @classmethod
    def from_params(cls, params: CircuitParams, CL: float | None = None):
        CL = params.CL if CL is None else CL
        return cls(
            gm_r0=params.gm * params.r0,
            tau_in=params.r0 * params.Cfi,
            k_v2t=params.Cfi / params.Icm,
            k_t2i=2.0 * params.Ion / params.T0,
            rout=params.rout,
            tau_out=params.rout * CL,
        )

    @property
    def forward(self):
        """Gain from output current to t_q1, Z2(0) A1(0) Cfi/Icm, in s/A."""
        return self.rout * self.gm_r0 * self.k_v2t

    @property
    def loop_gain(self):
        return self.forward * self.k_t2i

    def A1(self, s):
        return self.gm_r0 / (1 + s * self.tau_in)

    def Z2(self, s):
        return self.rout / (1 + s * self.tau_out)

    def characteristic(self):
        """(1 + s r0 Cfi)(1 + s rout CL) + A0, shared by every loop transfer."""
        den = np.polymul([self.tau_in, 1.0], [self.tau_out, 1.0])
        den[-1] += self.loop_gain
        return den


def loop_gain(params: CircuitParams, CL: float | None = None) -> float:
    return BlockGains.from_params(params, CL).loop_gain


def stf(params: CircuitParams, CL: float | None = None) -> RationalTF:
    """Faradaic current to pulse width t_q1 (s/A)."""
    b = BlockGains.from_params(params, CL)
    return RationalTF([b.forward], b.characteristic(), "s/A")


def ntf_quantization(params: CircuitParams, CL: float | None = None) -> RationalTF:
    """Flip-flop timing error to t_q1 (dimensionless); two zeros, second-order shaping."""
    b = BlockGains.from_params(params, CL)
    num = np.polymul([b.tau_in, 1.0], [b.tau_out, 1.0])
    return RationalTF(num, b.characteristic(), "s/s")


def ntf_input(params: CircuitParams, CL: float | None = None) -> RationalTF:
    """Input-referred noise voltage to t_q1 (s/V); one zero, first-order shaping."""
    b = BlockGains.from_params(params, CL)
    num = np.asarray([b.tau_out, 1.0]) * b.gm_r0 * b.k_v2t
    return RationalTF(num, b.characteristic(), "s/V")


def quantization_noise_psd(params: CircuitParams) -> float:
    """White timing-error PSD Tclk^2 T0 / 3 (s^2/Hz), spread over [0, f0]."""
    return params.Tclk**2 * params.T0 / 3.0


def input_noise_psd(params: CircuitParams) -> float:
    """Shot-noise PSD of the input devices, 2 q Icm / gm^2 (V^2/Hz)."""
    return 2.0 * Q_E * params.Icm / params.gm**2


def model_valid(params: CircuitParams, f):
    """True where the linear model applies (f <= f0/2)."""
    return np.asarray(f, dtype=float) <= 0.5 / params.T0 * (1 + 1e-9)


@dataclass
class NoiseSpectrum:
    f: np.ndarray
    total: np.ndarray
    quant: np.ndarray
    shot: np.ndarray
    valid: np.ndarray

    def inband_power(self):
        m = self.valid
        return float(np.trapezoid(self.total[m], self.f[m]))


def output_noise_spectrum(params: CircuitParams, CL: float | None = None, f=None) -> NoiseSpectrum:
    """Pulse-width noise PSD (s^2/Hz) with its quantization and shot parts."""
    if f is None:
        f = np.logspace(0, np.log10(0.5 / params.T0), 400)
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise ValueError("frequency grid must be positive")
    quant = np.abs(ntf_quantization(params, CL).freq(f)) ** 2 * quantization_noise_psd(params)
    shot = np.abs(ntf_input(params, CL).freq(f)) ** 2 * input_noise_psd(params)
    return NoiseSpectrum(f, quant + shot, quant, shot, model_valid(params, f))


def loglog_slope(f, y_db, f_lo, f_hi):
    """Least-squares slope in dB/decade of ``y_db`` over [f_lo, f_hi]."""
    f = np.asarray(f)
    m = (f >= f_lo) & (f <= f_hi)
    if m.sum() < 2:
        raise ValueError("need at least two points in the band")
    return float(np.polyfit(np.log10(f[m]), np.asarray(y_db)[m], 1)[0])
