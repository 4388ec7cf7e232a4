"""Inverse-crime recovery on a synthetic phantom (the A5 setting by default).

    python3 scripts/inverse_crime.py --size 16 --epochs 501 --out runs/a5
"""

import argparse
import time
from pathlib import Path

from bmapest.loss import LossSpec
from bmapest.metrics import evaluate, write_metrics_csv
from bmapest.optimize import OptimConfig, contrast_sets, estimate, write_history_csv
from bmapest.phantom import TissueTable, save_maps, synth_phantom
from bmapest.simulator import simulate_stack


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--contrasts", choices=("1", "4", "24"), default="24")
    ap.add_argument("--loss", choices=("image", "kspace"), default="image")
    ap.add_argument("--epochs", type=int, default=501)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--every", type=int, default=50, help="print progress every N epochs")
    ap.add_argument("--out", type=Path, default=Path("runs/inverse_crime"))
    a = ap.parse_args()

    table = TissueTable.default()
    truth = synth_phantom(a.seed, a.size)
    seqs = contrast_sets((a.size, a.size))[a.contrasts]
    obs = simulate_stack(truth, table, seqs, threads=a.threads)

    def progress(epoch, value, maps):
        if epoch % a.every == 0:
            print(f"epoch {epoch:5d}  loss {value:.4e}", flush=True)

    t0 = time.perf_counter()
    est, hist = estimate(obs, seqs, table, lossspec=LossSpec(a.loss),
                         config=OptimConfig(epochs=a.epochs, lr=a.lr), threads=a.threads, callback=progress)
    print(f"{a.epochs} epochs in {time.perf_counter() - t0:.1f} s")
    rows = evaluate(est, truth)
    for r in rows:
        print(f"{r.tissue:4s} dice {r.dice:.3f}  psnr {r.psnr:6.2f} dB  ssim {r.ssim:.3f}")

    a.out.mkdir(parents=True, exist_ok=True)
    save_maps(truth, a.out / "truth.bmap")
    save_maps(est, a.out / "estimate.bmap")
    write_history_csv(a.out / "history.csv", hist)
    write_metrics_csv(a.out / "metrics.csv", rows)


if __name__ == "__main__":
    main()
