"""Pulse-stream decoding and readout figures of merit.

A stream holds one output state per clock period.  States are stored as
int8 codes, +1 for P (sourcing ip), -1 for N (sinking in) and 0 for Z.
The faradaic current over a window of M periods is

    i_f = (p * ip - n * in) / M

with p and n the numbers of P and N periods in the window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .electrochem import ElectrodeGeometry, limiting_current

_TO_CODE = {"P": 1, "N": -1, "Z": 0}
_FROM_CODE = np.array(["N", "Z", "P"])


class StreamFormatError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class PulseStream:
    codes: np.ndarray
    fclk: float

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int8)
        if codes.ndim != 1 or codes.size < 1:
            raise ValueError("a stream needs at least one clock period")
        if not self.fclk > 0:
            raise ValueError("fclk must be positive")
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)

    @property
    def M(self):
        return int(self.codes.size)

    @property
    def duration(self):
        return self.M / self.fclk

    @classmethod
    def from_chars(cls, chars: str, fclk: float):
        try:
            codes = np.fromiter((_TO_CODE[c] for c in chars), dtype=np.int8, count=len(chars))
        except KeyError as exc:
            raise StreamFormatError(f"unknown state {exc.args[0]!r}") from None
        return cls(codes, fclk)

    def chars(self) -> str:
        return "".join(_FROM_CODE[self.codes + 1])

    def __getitem__(self, sl):
        if not isinstance(sl, slice):
            raise TypeError("streams slice by range only")
        return PulseStream(self.codes[sl], self.fclk)

    def __add__(self, other):
        if other.fclk != self.fclk:
            raise ValueError("cannot join streams with different clocks")
        return PulseStream(np.concatenate([self.codes, other.codes]), self.fclk)

    def counts(self):
        c = self.codes
        return int(np.count_nonzero(c == 1)), int(np.count_nonzero(c == -1))


def write_stream(stream: PulseStream, path, width: int = 80):
    chars = stream.chars()
    with open(path, "w") as fh:
        fh.write(f"fclk_hz={stream.fclk!r}\n")
        for k in range(0, len(chars), width):
            fh.write(chars[k:k + width] + "\n")


def read_stream(path) -> PulseStream:
    """Parse a stream file: ``fclk_hz=<v>`` then P/N/Z characters.

    Whitespace and line breaks between states are ignored.  Errors carry
    the 1-based line number.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip().startswith("fclk_hz="):
        raise StreamFormatError("missing fclk_hz= header", 1)
    try:
        fclk = float(lines[0].strip().split("=", 1)[1])
    except ValueError:
        raise StreamFormatError("bad clock frequency", 1) from None
    if not fclk > 0:
        raise StreamFormatError("clock frequency must be positive", 1)
    parts = []
    for lineno, line in enumerate(lines[1:], start=2):
        body = "".join(line.split())
        bad = set(body) - set("PNZ")
        if bad:
            raise StreamFormatError(f"unexpected characters {''.join(sorted(bad))!r}", lineno)
        parts.append(body)
    chars = "".join(parts)
    if not chars:
        raise StreamFormatError("stream has no states", len(lines))
    return PulseStream.from_chars(chars, fclk)


# --------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class DecodeResult:
    i_f: float
    p: int
    n: int
    M: int
    lsb: float
    code: int


def lsb_current(ip: float, M: int) -> float:
    """Smallest representable current: one ip pulse spread over M periods."""
    if M < 1:
        raise ValueError("M must be at least 1")
    return ip / M


def decode(stream: PulseStream, ip: float, in_: float) -> DecodeResult:
    if not (ip > 0 and in_ > 0):
        raise ValueError("ip and in must be positive")
    if stream.M < 1:
        raise ValueError("empty stream")
    p, n = stream.counts()
    M = stream.M
    i_f = (p * ip - n * in_) / M
    return DecodeResult(i_f, p, n, M, lsb_current(ip, M), int(round(p - n * in_ / ip)))


def window_decode(stream: PulseStream, ip: float, in_: float, window: int):
    """Decode consecutive non-overlapping windows of ``window`` periods.

    A trailing partial window is dropped.  Returns ``(start_s, i_f, p, n)``
    arrays.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    nwin = stream.M // window
    if nwin < 1:
        raise ValueError("window longer than stream")
    c = stream.codes[: nwin * window].reshape(nwin, window)
    p = np.count_nonzero(c == 1, axis=1)
    n = np.count_nonzero(c == -1, axis=1)
    start = np.arange(nwin) * window / stream.fclk
    return start, (p * ip - n * in_) / window, p, n


def sensitivity_lsb_per_mM(geom: ElectrodeGeometry, ip: float, T: float, fclk: float) -> float:
    """Decoded LSBs per mM of analyte for a disc electrode."""
    M = int(round(T * fclk))
    if M < 1:
        raise ValueError("acquisition shorter than one clock period")
    return limiting_current(geom, 1.0) / lsb_current(ip, M)


def noise_rms(streams: Sequence[PulseStream], ip: float, in_: float, window: int | None = None) -> float:
    """RMS of windowed decodes of zero-input streams.

    The deviation is taken about zero, the ideal reading for no input.  The
    default window is 1/256 of the shortest stream.
    """
    streams = list(streams)
    if not streams:
        raise ValueError("no streams")
    if window is None:
        window = max(1, min(s.M for s in streams) // 256)
    vals = [window_decode(s, ip, in_, window)[1] for s in streams if s.M >= window]
    vals = np.concatenate(vals) if vals else np.empty(0)
    if vals.size < 2:
        raise ValueError("need at least two windows")
    return float(np.sqrt(np.mean(vals**2)))


def dynamic_range(i_max: float, i_noise_rms: float) -> float:
    if not (i_max > 0 and i_noise_rms > 0):
        raise ValueError("both currents must be positive")
    return 20.0 * math.log10(i_max / i_noise_rms)


@dataclass
class RunningEstimate:
    t: np.ndarray
    estimate: np.ndarray
    settle_index: int

    @property
    def settle_time(self):
        return self.t[self.settle_index - 1]


def running_estimate(stream: PulseStream, ip: float, in_: float, tol: float = 0.05) -> RunningEstimate:
    """Cumulative decode after each prefix and the prefix length where it settles.

    ``settle_index`` is the smallest prefix length m such that every prefix of
    length >= m decodes within ``tol * |final|`` of the full-stream value.
    """
    c = stream.codes
    # integer counts keep the last entry identical to decode()
    p = np.cumsum(c == 1)
    n = np.cumsum(c == -1)
    m = np.arange(1, stream.M + 1)
    est = (p * ip - n * in_) / m
    final = est[-1]
    outside = np.abs(est - final) > tol * abs(final)
    idx = np.flatnonzero(outside)
    settle = 1 if idx.size == 0 else int(idx[-1]) + 2
    return RunningEstimate(m / stream.fclk, est, min(settle, stream.M))


# --------------------------------------------------------------------------
# spectra


def pulse_width_trace(stream: PulseStream, ip: float, in_: float, Ion: float, T0: float) -> np.ndarray:
    """Per-period pulse-width equivalent of the output, in seconds.

    Its mean equals the small-signal pulse width t_q1, so its spectrum is
    directly comparable with the loop transfer functions.
    """
    c = stream.codes
    i = np.where(c == 1, ip, np.where(c == -1, -in_, 0.0))
    return i * T0 / (2.0 * Ion)


def psd_welch(x, fs: float, nseg: int = 8, overlap: float = 0.5, nperseg: int | None = None):
    """One-sided Hann-window Welch PSD whose integral is the trace variance."""
    x = np.asarray(x.codes if isinstance(x, PulseStream) else x, dtype=float)
    if nperseg is None:
        nperseg = int(x.size / (1 + (nseg - 1) * (1 - overlap)))
    if nperseg > x.size or nperseg < 2:
        raise ValueError("segment longer than trace")
    return signal.welch(x, fs=fs, window="hann", nperseg=nperseg, noverlap=int(nperseg * overlap),
                        scaling="density", detrend="constant")


def fft_normalized(vout_p, fs: float):
    """Single-sided amplitude spectrum of a 0/1 output trace.

    The trace is divided by its high level (unit Vdd) and its mean removed,
    then zero-padded to a power of two.  Amplitudes are scaled by the
    unpadded length so that a tone of amplitude A reads A.
    """
    x = np.asarray(vout_p.codes == 1 if isinstance(vout_p, PulseStream) else vout_p, dtype=float)
    n = x.size
    x = x - x.mean()
    nfft = 1 << max(0, (n - 1).bit_length())
    X = np.fft.rfft(x, nfft)
    amp = np.abs(X) / n
    amp[1:] *= 2
    return np.fft.rfftfreq(nfft, 1.0 / fs), amp


def tone_projection(x, fs: float, f: float) -> complex:
    """Complex amplitude of the component of ``x`` at frequency ``f``.

    Uses a direct projection, exact for an integer number of cycles.
    """
    x = np.asarray(x, dtype=float)
    t = np.arange(x.size) / fs
    return complex(2.0 * np.mean(x * np.exp(-2j * np.pi * f * t)))
