"""Run the four ablation studies over synthetic subjects and write CSV tables.

    python3 scripts/ablations.py --subjects 1,2,3 --size 16 --out runs/ablations
"""

import argparse
import logging
from pathlib import Path

from bmapest.metrics import METRICS, fmt
from bmapest.optimize import ABLATIONS, OptimConfig, run_ablation
from bmapest.phantom import TISSUES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kinds", default=",".join(ABLATIONS))
    ap.add_argument("--subjects", default="1,2,3")
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=501)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs/ablations"))
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    a.out.mkdir(parents=True, exist_ok=True)
    subjects = [int(s) for s in a.subjects.split(",")]
    cfg = OptimConfig(epochs=a.epochs, lr=a.lr)
    for kind in a.kinds.split(","):
        res = run_ablation(kind, subjects, a.size, cfg, threads=a.threads, out=a.out / f"{kind}.csv")
        print(f"\n{kind}")
        print(f"{'config':10s} {'tissue':6s} " + " ".join(f"{m:>12s}" for m in METRICS))
        for conf, agg in res.summary().items():
            for t in TISSUES:
                print(f"{conf:10s} {t:6s} " + " ".join(f"{fmt(*agg[(t, m)]):>12s}" for m in METRICS))


if __name__ == "__main__":
    main()
