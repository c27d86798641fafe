"""Run every experiment with its bundled preset and collect the CSVs.

    python scripts/reproduce_figures.py [out_dir]

Each command gets its own subdirectory.  The decode step reads back the
stream written by the chronoamperometry run.
"""
import sys
from pathlib import Path

from dbpot.cli import main

RUNS = [
    ("bode", []),
    ("noise", []),
    ("chrono", ["--set", "experiment.cal=4"]),
    ("ferro-sweep", []),
    ("glucose-cal", []),
    ("multidie", []),
]


def run_all(out: Path):
    for name, extra in RUNS:
        code = main([name, "--out", str(out / name), *extra])
        if code:
            raise SystemExit(f"{name} failed with exit code {code}")
    # the stream file has no calibration code, so pass the one used above
    code = main(["decode", "--stream", str(out / "chrono" / "chrono_stream.txt"), "--out", str(out / "decode"),
                 "--set", "circuit.cal_p=4", "--set", "circuit.cal_n=4"])
    if code:
        raise SystemExit(f"decode failed with exit code {code}")


if __name__ == "__main__":
    run_all(Path(sys.argv[1] if len(sys.argv) > 1 else "results"))
