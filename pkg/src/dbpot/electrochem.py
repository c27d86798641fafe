"""Electrochemical cell and microdisc electrode models.

Units are SI throughout: A, V, s, m and mol/m^3.  Concentrations in mM are
numerically identical to mol/m^3, so they can be passed as-is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

FARADAY = 96485.33  # C/mol
FERRO_D = 6.67e-10  # m^2/s, ferrocyanide in aqueous NaCl

# Shoup-Szabo coefficients for the dimensionless microdisc current
_SS_A = 0.7854
_SS_B = 0.8862
_SS_C = 0.2146
_SS_K = 0.7823


@dataclass(frozen=True)
class RandlesCell:
    """Charge-transfer resistance in parallel with an interfacial capacitance.

    ``cpe_alpha`` is kept for a future constant-phase element; only the ideal
    capacitor (alpha = 1) is implemented.
    """

    Rp: float = 220e6
    Cp: float = 7e-9
    Rs: float = 0.0
    cpe_alpha: float = 1.0

    def __post_init__(self):
        bad = []
        if not self.Rp > 0:
            bad.append("Rp")
        if not self.Cp > 0:
            bad.append("Cp")
        if not self.Rs >= 0:
            bad.append("Rs")
        if self.cpe_alpha != 1.0:
            bad.append("cpe_alpha")
        if bad:
            raise ValueError(f"invalid RandlesCell fields: {', '.join(bad)}")


@dataclass(frozen=True)
class ElectrodeGeometry:
    a: float = 25e-6
    n: int = 1
    D: float = FERRO_D
    F: float = FARADAY

    def __post_init__(self):
        bad = [name for name, ok in (("a", self.a > 0), ("n", self.n >= 1), ("D", self.D > 0)) if not ok]
        if bad:
            raise ValueError(f"invalid ElectrodeGeometry fields: {', '.join(bad)}")


def limiting_current(geom: ElectrodeGeometry, c: float) -> float:
    """Steady-state diffusion-limited current of an inlaid microdisc, 4nFDca."""
    if c < 0:
        raise ValueError("concentration must be non-negative")
    return 4.0 * geom.n * geom.F * geom.D * c * geom.a


def ferrocyanide_current(geom: ElectrodeGeometry, c: float) -> float:
    """Limiting current for ferrocyanide oxidation (one electron).

    Any ``n`` on ``geom`` is overridden with 1; the diffusion coefficient on
    ``geom`` is used as given, so pass ``ElectrodeGeometry(a=...)`` to get the
    literature default.  This is the diffusion-controlled source used by the
    loop simulator.
    """
    g = geom if geom.n == 1 else ElectrodeGeometry(a=geom.a, n=1, D=geom.D, F=geom.F)
    return limiting_current(g, c)


def microdisc_f(tau):
    """Dimensionless microdisc chronoamperometric current (Shoup-Szabo).

    ``tau = 4 D t / a^2``.  Tends to 1 for long times and to the Cottrell
    current of a disc of area pi a^2 for short times.
    """
    tau = np.asarray(tau, dtype=float)
    x = 1.0 / np.sqrt(tau)
    out = _SS_A + _SS_B * x + _SS_C * np.exp(-_SS_K * x)
    return out if out.ndim else float(out)


def microdisc_transient(geom: ElectrodeGeometry, c: float, t):
    """Current transient after a diffusion-limited potential step at t=0."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("time must be strictly positive")
    tau = 4.0 * geom.D * t / geom.a**2
    return limiting_current(geom, c) * microdisc_f(tau)


def cottrell_disc(geom: ElectrodeGeometry, c: float, t):
    """Planar (Cottrell) current through a disc of area pi a^2."""
    t = np.asarray(t, dtype=float)
    return geom.n * geom.F * c * np.sqrt(geom.D / (np.pi * t)) * np.pi * geom.a**2


def randles_impedance(cell: RandlesCell, f):
    """Impedance of the Randles cell at frequency ``f`` (Hz)."""
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    z = cell.Rs + cell.Rp / (1.0 + 2j * np.pi * f * cell.Rp * cell.Cp)
    return z if z.ndim else complex(z)


# --------------------------------------------------------------------------
# transient fitting


class FitError(RuntimeError):
    """Raised when the least-squares fit does not converge.

    ``best`` holds the best parameters found before giving up.
    """

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


@dataclass
class TransientFit:
    D: float
    c: float
    D_stderr: float
    c_stderr: float
    rms_rel: float
    iterations: int

    def rows(self):
        return [("D", self.D, self.D_stderr), ("c", self.c, self.c_stderr), ("rms_rel", self.rms_rel, 0.0)]


def levenberg_marquardt(residual, p0, max_iter=200, xtol=1e-8, rel_step=1e-6, lam0=1e-3):
    """Damped Gauss-Newton on ``residual(p) -> array``.

    The Jacobian is estimated by forward differences with a step relative to
    each parameter, floored at magnitude 1 so parameters near zero still get
    a usable step.  Returns ``(p, jac, n_iter)``; raises :class:`FitError`
    after ``max_iter`` iterations without a step below ``xtol`` on the same
    scale.
    """
    p = np.array(p0, dtype=float)
    r = residual(p)
    cost = r @ r
    lam = lam0

    def jacobian(p, r):
        J = np.empty((r.size, p.size))
        for k in range(p.size):
            h = rel_step * max(abs(p[k]), 1.0)
            dp = p.copy()
            dp[k] += h
            J[:, k] = (residual(dp) - r) / h
        return J

    J = jacobian(p, r)
    for it in range(1, max_iter + 1):
        A = J.T @ J
        g = J.T @ r
        while True:
            M = A + lam * np.diag(np.diag(A))
            step = np.linalg.lstsq(M, -g, rcond=None)[0]
            trial = p + step
            r_trial = residual(trial)
            cost_trial = r_trial @ r_trial
            if np.isfinite(cost_trial) and cost_trial <= cost:
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
            if lam > 1e12:
                # no descent direction left: we sit at the minimum
                return p, J, it
        converged = np.all(np.abs(step) <= xtol * np.maximum(np.abs(p), 1.0))
        p, r, cost = trial, r_trial, cost_trial
        if converged:
            return p, jacobian(p, r), it
        J = jacobian(p, r)
    raise FitError(f"no convergence after {max_iter} iterations", p)


def fit_transient(t, i, a: float, n: int = 1, D0: float = FERRO_D, c0: float | None = None,
                  max_iter: int = 200) -> TransientFit:
    """Fit (D, c) of a microdisc transient to sampled currents.

    ``a`` and ``n`` are taken as known.  The fit runs on log(D/D0) and
    log(c/c0), so both stay positive and a unit step in either is a
    relative change.  Residuals are currents scaled by the largest sample.
    """
    t = np.asarray(t, dtype=float)
    i = np.asarray(i, dtype=float)
    if t.size < 8:
        raise ValueError("need at least 8 samples")
    if t.min() <= 0 or t.max() / t.min() < 10:
        raise ValueError("samples must span at least one decade of positive time")
    if np.any(i <= 0):
        raise ValueError("currents must be positive")
    if c0 is None:
        # steady-state guess from the latest sample
        c0 = i[np.argmax(t)] / (4 * n * FARADAY * D0 * a)

    def unpack(u):
        return D0 * math.exp(u[0]), c0 * math.exp(u[1])

    def model(u):
        D, c = unpack(u)
        return microdisc_transient(ElectrodeGeometry(a=a, n=n, D=D), c, t)

    scale = np.max(np.abs(i))

    def residual(u):
        return (model(u) - i) / scale

    try:
        u, J, iters = levenberg_marquardt(residual, [0.0, 0.0], max_iter=max_iter)
    except FitError as exc:
        D, c = unpack(exc.best)
        raise FitError(str(exc), {"D": D, "c": c}) from None

    r = residual(u)
    dof = max(t.size - 2, 1)
    s2 = (r @ r) / dof
    try:
        cov = s2 * np.linalg.inv(J.T @ J)
        err_log = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        err_log = np.full(2, np.nan)
    D, c = unpack(u)
    rel = model(u) / i - 1.0
    return TransientFit(D=D, c=c, D_stderr=float(D * err_log[0]), c_stderr=float(c * err_log[1]),
                        rms_rel=float(np.sqrt(np.mean(rel**2))), iterations=iters)


# --------------------------------------------------------------------------
# glucose calibration


@dataclass(frozen=True)
class Segment:
    lo: float
    hi: float
    slope: float
    intercept: float

    def __call__(self, c):
        return self.intercept + self.slope * c


class CalibratedCurrent(NamedTuple):
    current: float
    below_lod: bool
    extrapolated: bool


@dataclass(frozen=True)
class CalibrationCurve:
    segments: tuple[Segment, ...]
    lod: float

    def __post_init__(self):
        if not self.segments:
            raise ValueError("calibration needs at least one segment")
        if not self.lod > 0:
            raise ValueError("lod must be positive")
        for s in self.segments:
            if not (math.isfinite(s.slope) and s.hi > s.lo):
                raise ValueError(f"bad segment {s}")
        for s0, s1 in zip(self.segments, self.segments[1:]):
            if not math.isclose(s0.hi, s1.lo, rel_tol=1e-12):
                raise ValueError("segments must be contiguous")

    @property
    def lo(self):
        return self.segments[0].lo

    @property
    def hi(self):
        return self.segments[-1].hi

    @classmethod
    def continuous(cls, breakpoints: Sequence[float], slopes: Sequence[float], i0: float = 0.0,
                   lod: float = 0.53):
        """Build a piecewise-linear curve that is continuous at every breakpoint.

        ``breakpoints`` has one more entry than ``slopes``; ``i0`` is the
        current at the first breakpoint.
        """
        if len(breakpoints) != len(slopes) + 1:
            raise ValueError("need len(slopes) + 1 breakpoints")
        segs = []
        level = i0
        for lo, hi, k in zip(breakpoints, breakpoints[1:], slopes):
            segs.append(Segment(lo, hi, k, level - k * lo))
            level += k * (hi - lo)
        return cls(tuple(segs), lod)


# Two-segment glucose response: 0.3 nA/mM above the breakpoint.  The lower
# slope and the breakpoint are not reported and are chosen here.
GLUCOSE_DEFAULT = CalibrationCurve.continuous(
    breakpoints=(0.53, 20.0, 50.0), slopes=(0.5e-9, 0.3e-9), i0=0.5e-9 * 0.53, lod=0.53)


def glucose_current(cal: CalibrationCurve, c: float) -> CalibratedCurrent:
    """Current for glucose concentration ``c`` (mM) on a calibration curve.

    Below the LoD the reading is 0 A and flagged.  Outside the calibrated
    range the nearest segment is extended and the reading flagged.
    """
    if c < 0:
        raise ValueError("concentration must be non-negative")
    if c < cal.lod:
        return CalibratedCurrent(0.0, True, False)
    for seg in cal.segments:
        if seg.lo <= c <= seg.hi:
            return CalibratedCurrent(float(seg(c)), False, False)
    seg = cal.segments[0] if c < cal.lo else cal.segments[-1]
    return CalibratedCurrent(float(seg(c)), False, True)


def fit_two_segments(c, i, breakpoint: float | None = None, min_points: int = 3):
    """Fit a continuous two-segment line to (c, i) data.

    With ``breakpoint=None`` every interior data concentration is tried and the
    one with the least squared error wins.  Returns ``(breakpoint, slopes,
    intercepts)``.
    """
    c = np.asarray(c, dtype=float)
    i = np.asarray(i, dtype=float)
    order = np.argsort(c)
    c, i = c[order], i[order]

    def solve(bp):
        # hinge basis keeps the two lines joined at bp
        X = np.column_stack([np.ones_like(c), c, np.clip(c - bp, 0, None)])
        coef, *_ = np.linalg.lstsq(X, i, rcond=None)
        sse = float(np.sum((X @ coef - i) ** 2))
        return sse, coef

    candidates = [breakpoint] if breakpoint is not None else list(np.unique(c))
    best = None
    for bp in candidates:
        n_lo = int(np.sum(c <= bp))
        n_hi = int(np.sum(c >= bp))
        if n_lo < min_points or n_hi < min_points:
            continue
        sse, coef = solve(bp)
        if best is None or sse < best[0] - 1e-30:
            best = (sse, bp, coef)
    if best is None:
        raise ValueError(f"fewer than {min_points} points per segment")
    _, bp, (b0, k0, dk) = best
    k1 = k0 + dk
    return bp, (k0, k1), (b0, b0 - dk * bp)
