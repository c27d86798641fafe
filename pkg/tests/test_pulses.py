import numpy as np
import pytest

from dbpot.electrochem import ElectrodeGeometry
from dbpot.pulses import (PulseStream, StreamFormatError, decode, dynamic_range, fft_normalized, lsb_current,
                          noise_rms, psd_welch, read_stream, running_estimate, sensitivity_lsb_per_mM,
                          tone_projection, window_decode, write_stream)

FCLK = 50e3


def brute_force(chars, ip, in_):
    p = n = 0
    for ch in chars:
        if ch == "P":
            p += 1
        elif ch == "N":
            n += 1
    return (p * ip - n * in_) / len(chars), p, n


def random_stream(rng, m):
    return PulseStream(rng.integers(-1, 2, m), FCLK)


def test_decode_worked_example():
    codes = np.zeros(250000, dtype=np.int8)
    codes[:1000] = 1
    d = decode(PulseStream(codes, FCLK), 4.89e-9, 10.16e-9)
    assert d.i_f == pytest.approx(19.56e-12, rel=1e-9)
    assert (d.p, d.n, d.M) == (1000, 0, 250000)


def test_decode_all_z():
    d = decode(PulseStream(np.zeros(100), FCLK), 1e-9, 1e-9)
    assert d.i_f == 0.0 and d.code == 0


def test_decode_matches_recount(rng):
    for m in (1, 7, 1000, 33333):
        s = random_stream(rng, m)
        ref = brute_force(s.chars(), 4.89e-9, 10.16e-9)
        d = decode(s, 4.89e-9, 10.16e-9)
        assert (d.i_f, d.p, d.n) == ref


def test_decode_rejects_bad_currents():
    with pytest.raises(ValueError):
        decode(PulseStream([1], FCLK), 0.0, 1e-9)


def test_empty_stream_rejected():
    with pytest.raises(ValueError):
        PulseStream(np.zeros(0), FCLK)


def test_lsb():
    assert lsb_current(4.89e-9, 250000) == pytest.approx(19.56e-15)
    assert lsb_current(4.89e-9, 1) == 4.89e-9
    assert lsb_current(1e-9, 2000) == pytest.approx(lsb_current(1e-9, 1000) / 2)
    with pytest.raises(ValueError):
        lsb_current(1e-9, 0)


def test_sensitivity_scalings():
    g = ElectrodeGeometry(a=25e-6)
    s = sensitivity_lsb_per_mM(g, 4.89e-9, 5.0, FCLK)
    assert s == pytest.approx(329_014, rel=1e-3)
    assert sensitivity_lsb_per_mM(g, 4.89e-9, 10.0, FCLK) == pytest.approx(2 * s)
    assert sensitivity_lsb_per_mM(g, 9.78e-9, 5.0, FCLK) == pytest.approx(s / 2)


def test_dynamic_range():
    assert dynamic_range(175e-9, 46.72e-12) == pytest.approx(71.47, abs=0.01)
    assert dynamic_range(1e-9, 1e-9) == 0.0
    assert dynamic_range(10e-9, 1e-12) - dynamic_range(1e-9, 1e-12) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        dynamic_range(0.0, 1e-12)


def test_noise_rms_zero_for_idle_streams():
    streams = [PulseStream(np.zeros(2560), FCLK) for _ in range(10)]
    assert noise_rms(streams, 1e-9, 1e-9) == 0.0


def test_noise_rms_scales_with_window(rng):
    # independent +-1 pulses: white, so rms ~ 1/sqrt(window)
    streams = [PulseStream(rng.choice([-1, 1], 2**16), FCLK) for _ in range(10)]
    windows = [64, 256, 1024, 4096]
    rms = [noise_rms(streams, 1e-9, 1e-9, w) for w in windows]
    slope = np.polyfit(np.log(windows), np.log(rms), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.05)


def test_noise_rms_needs_two_windows():
    with pytest.raises(ValueError):
        noise_rms([PulseStream(np.zeros(100), FCLK)], 1e-9, 1e-9, window=100)


def test_window_decode_is_additive(rng):
    s = random_stream(rng, 1200)
    _, i_w, p, n = window_decode(s, 2e-9, 3e-9, 100)
    assert np.mean(i_w) == pytest.approx(decode(s, 2e-9, 3e-9).i_f, rel=1e-12)
    assert p.sum() == decode(s, 2e-9, 3e-9).p


def test_running_estimate_endpoints(rng):
    s = random_stream(rng, 5000)
    est = running_estimate(s, 1e-9, 1e-9, tol=0.0)
    assert est.estimate[-1] == decode(s, 1e-9, 1e-9).i_f
    assert est.settle_index == s.M
    wide = running_estimate(s, 1e-9, 1e-9, tol=1e9)
    assert wide.settle_index == 1


def test_running_estimate_constant_stream():
    s = PulseStream(np.tile([1, 0, 0, 0], 100), FCLK)
    est = running_estimate(s, 1e-9, 1e-9, tol=0.3)
    # the estimate is exact after every whole period of four
    assert est.estimate[3::4] == pytest.approx(np.full(100, 0.25e-9))
    assert est.settle_index <= 12


def test_stream_file_round_trip(tmp_path, rng):
    s = random_stream(rng, 1001)
    path = tmp_path / "s.txt"
    write_stream(s, path)
    back = read_stream(path)
    assert back.fclk == FCLK and np.array_equal(back.codes, s.codes)


def test_stream_file_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("fclk_hz=50000\nPPZ\nPXZ\n")
    with pytest.raises(StreamFormatError) as err:
        read_stream(bad)
    assert err.value.line == 3
    bad.write_text("PPZ\n")
    with pytest.raises(StreamFormatError) as err:
        read_stream(bad)
    assert err.value.line == 1


def test_welch_white_noise_parseval(rng):
    x = rng.normal(0, 2.0, 200_000)
    f, P = psd_welch(x, FCLK)
    assert np.trapezoid(P, f) == pytest.approx(x.var(), rel=0.02)
    # flat: band averages agree with the expected level 2 sigma^2 / fs
    bands = np.array_split(P[1:-1], 10)
    level = 2 * 4.0 / FCLK
    assert all(abs(10 * np.log10(b.mean() / level)) < 0.3 for b in bands)


def test_welch_sinusoid_peak():
    t = np.arange(100_000) / FCLK
    f, P = psd_welch(np.sin(2 * np.pi * 1234.0 * t), FCLK)
    assert abs(f[np.argmax(P)] - 1234.0) <= f[1]


def test_welch_segment_longer_than_trace():
    with pytest.raises(ValueError):
        psd_welch(np.zeros(100), FCLK, nperseg=200)


def test_fft_normalized_constant_and_tone():
    f, a = fft_normalized(np.ones(1000), FCLK)
    assert np.all(a == 0)
    assert len(f) == 1024 // 2 + 1
    n = 4096
    k = np.arange(n)
    x = (np.sin(2 * np.pi * 64 * k / n) > 0).astype(float)
    f, a = fft_normalized(x, FCLK)
    assert f[np.argmax(a)] == pytest.approx(64 * FCLK / n)


def test_tone_projection():
    t = np.arange(5000) / FCLK
    x = 3.0 * np.cos(2 * np.pi * 100.0 * t + 0.3)
    z = tone_projection(x, FCLK, 100.0)
    assert abs(z) == pytest.approx(3.0, rel=1e-9)
    assert np.angle(z) == pytest.approx(0.3, abs=1e-9)
