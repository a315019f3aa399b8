"""Run the experiment tables from configs/ through the CLI.

    python3 scripts/run_benchmarks.py                 # every table config
    python3 scripts/run_benchmarks.py F1 F5 I1        # a subset
    python3 scripts/run_benchmarks.py --out results --threads 1 smoke_F1
"""

import argparse
import json
import sys
from pathlib import Path

from scatterlab.cli import main as cli_main

ROOT = Path(__file__).resolve().parents[1]
COMMANDS = {"F1": "bench-f1", "F2": "bench-f2", "F3": "bench-f3", "F4": "bench-f4", "F5": "bench-f5",
            "I1": "bench-i1", "I2": "bench-i2", "I3": "bench-i3", "I4": "bench-i4", "I5": "rla",
            "spectra": "spectra", "forward": "forward", "rla": "rla"}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("names", nargs="*", help="config names under configs/ (without .json)")
    ap.add_argument("--out", default=str(ROOT / "results"))
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args(argv)

    names = args.names or sorted(p.stem for p in (ROOT / "configs").glob("*.json"))
    status = 0
    for name in names:
        path = ROOT / "configs" / f"{name}.json"
        experiment = json.loads(path.read_text())["experiment"]
        cmd = [COMMANDS[experiment], "--config", str(path), "--out", str(Path(args.out) / name)]
        if args.threads:
            cmd += ["--threads", str(args.threads)]
        print(f"== {name}: scatterlab {' '.join(cmd)}", flush=True)
        rc = cli_main(cmd)
        status = status or rc
    return status


if __name__ == "__main__":
    sys.exit(main())
