"""Run the shipped study configs and print each table.

Usage: python scripts/run_tables.py [--out results/] [--workers N] [config ...]
"""

import argparse
import time
from dataclasses import replace
from pathlib import Path

from magslam.harness import format_table, load_config, run_study, summarize

ROOT = Path(__file__).resolve().parent.parent
DEFAULT = ["table1_sigma_f", "table2_wrong_sigma_f", "table3_l", "table4_wrong_l", "table5_odometry_noise"]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("configs", nargs="*", default=DEFAULT)
    p.add_argument("--out", default=str(ROOT / "results"))
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    for name in args.configs:
        path = Path(name) if name.endswith(".ini") else ROOT / "configs" / f"{name}.ini"
        cfg = replace(load_config(path), workers=args.workers)
        t0 = time.perf_counter()
        rows = run_study(cfg, Path(args.out) / path.stem)
        summary = summarize(rows)
        print(f"== {path.stem} ({time.perf_counter() - t0:.0f} s)")
        print(format_table(summary))
        failed = sum(s["failed_0.05"] for s in summary)
        if failed:
            print(f"cells with rmse_after >= 0.05: {failed}")
        print()


if __name__ == "__main__":
    main()
