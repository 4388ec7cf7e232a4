"""Command-line entry point: ``bmapest <command> [flags]``.

Exit codes: 0 success, 1 validation or input error, 2 numerical abort
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from bmapest.errors import BMapError, NumericalError, ValidationError

log = logging.getLogger("bmapest")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so bad flags map onto exit code 1."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)  # a typo must not silently hit a longer flag
        super().__init__(*args, **kwargs)

    def error(self, message):
        flags = sorted({o for a in self._actions for o in a.option_strings})
        hint = f"; valid flags: {' '.join(flags)}" if flags else ""
        raise ValidationError(f"{self.prog}: {message}{hint}")


def _csv_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def _ints(text):
    try:
        return [int(x) for x in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _need_file(path, flag):
    if path is not None and not os.path.isfile(path):
        raise ValidationError(f"{flag}: no such file {path!r}")


def _need_dir(path, flag):
    if not os.path.isdir(path):
        raise ValidationError(f"{flag}: no such directory {path!r}")


def _need_parent(path, flag):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ValidationError(f"{flag}: output directory {parent!r} does not exist")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bmapest", description="Tissue probability map estimation with a differentiable MRI simulator.")
    p.add_argument("--threads", type=int, default=1, help="worker threads for the voxel loop (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    ph = sub.add_parser("phantom", help="make a synthetic phantom or convert raw maps")
    g = ph.add_mutually_exclusive_group(required=True)
    g.add_argument("--synth", action="store_true")
    g.add_argument("--convert", metavar="RAW", help="8-bit raw planes with a JSON sidecar")
    ph.add_argument("--sidecar")
    ph.add_argument("--seed", type=int, default=1)
    ph.add_argument("--size", type=int, default=64)
    ph.add_argument("--out", required=True, help=".bmap or .csv")

    sm = sub.add_parser("simulate", help="simulate contrasts from probability maps")
    sm.add_argument("--maps", required=True)
    sm.add_argument("--seq", required=True, help="comma-separated preset names")
    sm.add_argument("--table", help="tissue parameter config file")
    sm.add_argument("--mode", default="idealized", choices=("idealized", "intra_readout_decay"))
    sm.add_argument("--out", required=True)

    es = sub.add_parser("estimate", help="fit probability maps to observed contrasts")
    es.add_argument("--obs", required=True, help="directory written by simulate")
    es.add_argument("--seq", help="comma-separated presets (default: taken from the observation labels)")
    es.add_argument("--config", help="run config file (optim.*, loss.*, tissue keys)")
    es.add_argument("--table", help="tissue parameter config file")
    es.add_argument("--param", default="direct", choices=("direct", "atlas", "scalar"))
    es.add_argument("--atlas-seeds", type=_ints, default=list(range(101, 120)), help="synthetic atlas subjects")
    es.add_argument("--loss", choices=("image", "kspace"))
    es.add_argument("--epochs", type=int)
    es.add_argument("--lr", type=float)
    es.add_argument("--seed", type=int)
    es.add_argument("--optimizer", choices=("adam", "sgd"))
    es.add_argument("--free", help="comma-separated maps to optimize; others come from --fixed")
    es.add_argument("--fixed", help="maps holding the values of the non-free channels")
    es.add_argument("--mode", default="idealized", choices=("idealized", "intra_readout_decay"))
    es.add_argument("--out", required=True)
    es.add_argument("--history")

    mt = sub.add_parser("metrics", help="DICE / PSNR / SSIM per tissue")
    mt.add_argument("--pred", required=True)
    mt.add_argument("--gt", required=True)
    mt.add_argument("--out")

    ab = sub.add_parser("ablate", help="run an ablation study on synthetic subjects")
    ab.add_argument("--kind", required=True, choices=("contrast_sweep", "param_sweep", "single_map", "loss_domain"))
    ab.add_argument("--subjects", type=_ints, default=[1, 2, 3])
    ab.add_argument("--size", type=int, default=16)
    ab.add_argument("--epochs", type=int, default=501)
    ab.add_argument("--lr", type=float, default=0.01)
    ab.add_argument("--out", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the map gradient")
    gc.add_argument("--size", type=int, default=8)
    gc.add_argument("--preset", default="me_flash")
    gc.add_argument("--eps", type=float, default=1e-4)
    gc.add_argument("--coords", type=int, default=32)
    gc.add_argument("--tol", type=float, default=1e-5)
    return p


def _load_maps_any(path):
    from bmapest.phantom import load_maps, load_maps_csv

    return load_maps_csv(path) if path.endswith(".csv") else load_maps(path)


def _save_maps_any(maps, path):
    from bmapest.phantom import save_maps, save_maps_csv

    (save_maps_csv if path.endswith(".csv") else save_maps)(maps, path)


def _table(path):
    from bmapest.config import load_config
    from bmapest.phantom import TissueTable

    return TissueTable.from_config(load_config(path)) if path else TissueTable.default()


def cmd_phantom(a):
    from bmapest.phantom import import_raw, synth_phantom

    _need_parent(a.out, "--out")
    if a.convert:
        _need_file(a.convert, "--convert")
        _need_file(a.sidecar, "--sidecar")
        maps = import_raw(a.convert, a.sidecar)
    else:
        maps = synth_phantom(a.seed, a.size)
    _save_maps_any(maps, a.out)
    print(f"wrote {maps.height}x{maps.width} maps to {a.out}")


def cmd_simulate(a):
    from bmapest.sequence import presets
    from bmapest.simulator import simulate_stack, write_stack

    _need_file(a.maps, "--maps")
    _need_file(a.table, "--table")
    _need_parent(a.out, "--out")
    maps = _load_maps_any(a.maps)
    table = _table(a.table)
    seqs = presets(a.seq, maps.shape, table)
    stack = simulate_stack(maps, table, seqs, mode=a.mode, threads=a.threads)
    write_stack(stack, a.out)
    print(f"wrote {len(stack)} contrasts to {a.out}")


def _labels_to_presets(labels):
    names = []
    for name, _ in labels:
        if name not in names:
            names.append(name)
    return ",".join(names)


def cmd_estimate(a):
    from bmapest.config import load_config
    from bmapest.optimize import OptimConfig, LossSpec, estimate, make_parameterization, optim_config_from, loss_spec_from, write_history_csv
    from bmapest.phantom import TissueTable, synth_phantom
    from bmapest.sequence import presets
    from bmapest.simulator import read_stack

    _need_dir(a.obs, "--obs")
    for f in ("labels.txt", "kspace.bmap", "images.bmap"):
        _need_file(os.path.join(a.obs, f), "--obs")
    _need_file(a.config, "--config")
    _need_file(a.table, "--table")
    _need_file(a.fixed, "--fixed")
    _need_parent(a.out, "--out")
    if a.history:
        _need_parent(a.history, "--history")
    if a.free and not a.fixed:
        raise ValidationError("--free needs --fixed for the maps that are held")

    cfg = load_config(a.config) if a.config else {}
    config = optim_config_from(cfg)
    spec = loss_spec_from(cfg)
    table = TissueTable.from_config(cfg, _table(a.table))
    over = {k: v for k, v in (("epochs", a.epochs), ("lr", a.lr), ("seed", a.seed), ("optimizer", a.optimizer)) if v is not None}
    if a.free:
        over["free_maps"] = tuple(_csv_list(a.free))
    config = replace(config, **over) if over else config
    if a.loss:
        spec = LossSpec(a.loss, spec.weights)

    obs = read_stack(a.obs)
    shape = obs.images.shape[1:]
    seqs = presets(a.seq or _labels_to_presets(obs.labels), shape, table)
    basis = [synth_phantom(s, shape[0]) for s in a.atlas_seeds] if a.param != "direct" else None
    if basis and shape[0] != shape[1]:
        raise ValidationError("synthetic atlases need a square matrix")
    param = make_parameterization(a.param, basis)
    fixed = _load_maps_any(a.fixed) if a.fixed else None

    def progress(epoch, value, maps):
        if epoch % 50 == 0:
            log.info("epoch %d loss %.6e", epoch, value)

    maps, hist = estimate(obs, seqs, table, param, spec, config, fixed=fixed, mode=a.mode, threads=a.threads, callback=progress)
    _save_maps_any(maps, a.out)
    if a.history:
        write_history_csv(a.history, hist)
    final = f"{hist[-1]:.6e}" if hist else "n/a"
    print(f"{config.epochs} epochs, final loss {final}; wrote {a.out}")


def cmd_metrics(a):
    from bmapest.metrics import evaluate, write_metrics_csv

    _need_file(a.pred, "--pred")
    _need_file(a.gt, "--gt")
    if a.out:
        _need_parent(a.out, "--out")
    rows = evaluate(_load_maps_any(a.pred), _load_maps_any(a.gt))
    for r in rows:
        print(f"{r.tissue:>4}  dice {r.dice:.4f}  psnr {r.psnr:7.2f}  ssim {r.ssim:.4f}")
    if a.out:
        write_metrics_csv(a.out, rows)


def cmd_ablate(a):
    from bmapest.optimize import OptimConfig, run_ablation

    _need_parent(a.out, "--out")
    config = OptimConfig(epochs=a.epochs, lr=a.lr)
    res = run_ablation(a.kind, a.subjects, a.size, config, threads=a.threads, out=a.out)
    for conf, agg in res.summary().items():
        cells = "  ".join(f"{t}:{agg[(t, 'psnr')][0]:.2f}dB" for t in ("csf", "gm", "wm"))
        print(f"{conf:>10}  {cells}")


def cmd_gradcheck(a):
    import numpy as np

    from bmapest.grad import chain_closure, gradcheck
    from bmapest.loss import LossSpec
    from bmapest.phantom import TissueTable, synth_phantom
    from bmapest.sequence import preset
    from bmapest.simulator import simulate_stack

    table = TissueTable.default()
    truth = synth_phantom(1, a.size)
    seq = preset(a.preset, (a.size, a.size), table, echo_times=(4.0, 9.0)) if a.preset != "t2prep" else preset(
        a.preset, (a.size, a.size), table, taus=(40.0, 80.0))
    # halfway between the truth and the uniform start: inside the box, away from the background floor
    point = 0.5 * truth.stack() + 1.0 / 6.0
    obs = simulate_stack(truth, table, [seq], threads=a.threads)
    worst = 0.0
    for domain in ("image", "kspace"):
        rep = gradcheck(chain_closure(table, [seq], obs, LossSpec(domain), threads=a.threads), point, eps=a.eps, n_coords=a.coords)
        print(f"[{domain}]")
        print(rep.table())
        worst = max(worst, rep.max_rel_err)
    ok = worst <= a.tol
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: max rel err {worst:.3e} (tol {a.tol:g})")
    if not ok:
        raise NumericalError(f"gradient check failed: {worst:.3e} > {a.tol:g}")


def _subparser(parser, name):
    for act in parser._actions:
        if isinstance(act, argparse._SubParsersAction):
            return act.choices[name]
    raise KeyError(name)


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "metrics": cmd_metrics,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        parser = build_parser()
        a, extra = parser.parse_known_args(argv)
        if a.command is None:
            raise ValidationError(f"missing command; choose one of {', '.join(COMMANDS)}")
        if extra:
            sub = _subparser(parser, a.command)
            flags = sorted({o for act in sub._actions + parser._actions for o in act.option_strings})
            raise ValidationError(f"{a.command}: unrecognized arguments {' '.join(extra)}; valid flags: {' '.join(flags)}")
        if a.threads < 1:
            raise ValidationError("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[a.command](a)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (BMapError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
