"""Run the whole pipeline on the bundled desk config and summarise the report.

    python demos/desk_pipeline.py [--out-dir farelab-demo]

The same run from the shell is ``farelab run-all --out-dir farelab-demo``.
"""

import argparse
import json
from pathlib import Path

from farelab.cli import main as farelab_main


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="farelab-demo")
    args = ap.parse_args()
    out = Path(args.out_dir)
    if farelab_main(["run-all", "--out-dir", str(out)]) != 0:
        raise SystemExit(1)
    doc = json.loads((out / "report.json").read_text())
    rep = doc["report"]
    print(f"report checksum {doc['report_checksum']}")
    print(f"selected layers {rep['selected_layers']}, lambda* = {rep['lambda_star']}")
    for t in rep["evaluation"]["tests"]:
        print(f"  {t['endpoint']:26s} delta {t['delta_pts']:+7.2f} pts  p={t['p_value']:.4f}  p_BH={t['p_bh']:.4f}")
    for r in rep["masking"]:
        print(f"  mask {r['condition']:14s} dUtil {r['delta_utility']:+6.1f}")
    print(f"plots in {out / 'plots'}")


if __name__ == "__main__":
    main()
