#!/usr/bin/env python3
"""Run the bundled synthetic pipeline end to end and print where the
artifacts landed.

Usage: python scripts/run_synthetic_pipeline.py [out_dir]
"""
import sys
from pathlib import Path

from lanescope import cli

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "runs/synthetic"
    config = ROOT / "configs" / "synthetic.json"
    code = cli.run("pipeline", config, [f"io.out_dir={out_dir}"])
    if code == 0:
        print(f"pipeline finished; artifacts under {out_dir}/")
        print("  labels/        per-sequence (frame, label) CSVs")
        print("  analysis/      occupancy, prototypes, transitions, lateral states")
        print("  manifests/     per-stage config + hash manifests")
    return code


if __name__ == "__main__":
    sys.exit(main())
