"""Quick-look plots of the CSVs written by reproduce_figures.py (needs matplotlib).

    python scripts/plot_results.py [results_dir]
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def load(path):
    return np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding=None)


def plot_bode(res, ax):
    for model in sorted((res / "bode").glob("bode_model_*.csv")):
        label = model.stem.split("bode_model_")[1]
        m = load(model)
        s = load(res / "bode" / f"bode_sim_{label}.csv")
        keep = m["f_hz"] > 0
        line, = ax.semilogx(m["f_hz"][keep], m["mag_db"][keep], label=f"model {label}")
        ax.semilogx(s["f_hz"], s["mag_db"], "o", color=line.get_color(), label=f"sim {label}")
    ax.set(xlabel="f (Hz)", ylabel="|STF| (dB s/A)")
    ax.legend(fontsize=7)


def plot_noise(res, ax):
    m = load(res / "noise" / "noise_model.csv")
    s = load(res / "noise" / "noise_sim.csv")
    ax.loglog(s["f_hz"], s["psd_sim"], lw=0.8, label="simulated")
    ax.loglog(m["f_hz"], m["psd_total"], label="model")
    ax.loglog(m["f_hz"], m["psd_quant"], "--", label="quantization")
    ax.loglog(m["f_hz"], m["psd_shot"], ":", label="shot")
    ax.set(xlabel="f (Hz)", ylabel="PSD (s^2/Hz)")
    ax.legend(fontsize=7)


def plot_sweep(res, ax):
    d = load(res / "ferro-sweep" / "ferro_sweep.csv")
    ax.loglog(d["setpoint_A"], d["decoded_A"], "o")
    lim = [d["setpoint_A"].min(), d["setpoint_A"].max()]
    ax.loglog(lim, lim, "k--", lw=0.8)
    ax.set(xlabel="true current (A)", ylabel="decoded current (A)")


def plot_glucose(res, ax):
    d = load(res / "glucose-cal" / "glucose_readings.csv")
    ax.plot(d["conc_mM"], d["decoded_A"] * 1e9, "o")
    ax.set(xlabel="glucose (mM)", ylabel="current (nA)")


if __name__ == "__main__":
    res = Path(sys.argv[1] if len(sys.argv) > 1 else "results")
    fig, axes = plt.subplots(2, 2, figsize=(10, 8))
    for fn, ax in zip((plot_bode, plot_noise, plot_sweep, plot_glucose), axes.flat):
        fn(res, ax)
    fig.tight_layout()
    fig.savefig(res / "overview.png", dpi=120)
    print(f"wrote {res / 'overview.png'}")
