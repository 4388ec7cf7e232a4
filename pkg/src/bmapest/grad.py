"""Reverse-mode gradients of the loss with respect to the probability maps.

:func:`forward` runs mix -> per-voxel EPG -> encoding -> (inverse FFT ->
magnitude) -> loss and writes one :class:`Record` per primitive onto a
:class:`Tape`. :func:`backward` walks the records in reverse, calling the
registered adjoint of each op and accumulating adjoints by variable name.

Complex variables carry gradients as ``dL/dRe + i dL/dIm``; with that
convention a complex-linear map ``y = A x`` pulls back as ``A^H g``.

The EPG stage is the one place that does not store a state history: the
voxel kernel propagates forward-mode tangents of each echo with respect to
the voxel's five tissue parameters, and its record saves that Jacobian.
Its adjoint is then a contraction, which keeps memory at one Jacobian per
(voxel, readout) instead of one state per event.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bmapest.errors import BMapError, NumericalError, ValidationError
from bmapest.fft import fft2, ifft2
from bmapest.loss import LossSpec, check_congruent
from bmapest.phantom import DEFAULT_PD_FLOOR, PARAMS, ProbabilityMaps, QuantitativeMaps, TissueTable, mix_adjoint
from bmapest.simulator import CompiledProgram, ContrastStack, compile_program, encode, encode_adjoint, voxel_signals


class TapeError(BMapError):
    """Backward requested on a tape that never finished its forward pass."""


@dataclass
class Record:
    op: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    saved: dict = field(default_factory=dict)


@dataclass
class Tape:
    records: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    loss_var: str | None = None

    def record(self, op, inputs, outputs, values, **saved):
        for name, val in zip(outputs, values):
            self.values[name] = val
        self.records.append(Record(op, tuple(inputs), tuple(outputs), saved))

    @property
    def complete(self) -> bool:
        return self.loss_var is not None and self.loss_var in self.values


@dataclass(frozen=True)
class GradientMaps:
    d_csf: np.ndarray
    d_gm: np.ndarray
    d_wm: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.d_csf, self.d_gm, self.d_wm])

    @classmethod
    def from_stack(cls, g) -> "GradientMaps":
        return cls(g[0].copy(), g[1].copy(), g[2].copy())


# ---------------------------------------------------------------------------
# adjoint rules: (saved, output adjoints) -> input adjoints


def _adj_mix(saved, g_q):
    g = mix_adjoint({p: g_q[0][i] for i, p in enumerate(PARAMS)}, saved["table"])
    return [g]


def _adj_epg(saved, g_sig):
    vs = saved["vs"]
    ny, nx = saved["shape"]
    g_q = np.zeros((len(PARAMS), ny * nx))
    # dL/dp = Re sum_slots conj(g_sig) * dsig/dp
    contrib = np.real(np.einsum("vs,vsp->pv", np.conj(g_sig[0]), vs.tan))
    g_q[:, vs.active] = contrib
    return [g_q.reshape(len(PARAMS), ny, nx)]


def _adj_encode(saved, g_k):
    g_sig, g_t2, g_t2p = encode_adjoint(saved["prog"], saved["vs"], saved["qmaps"], saved["mode"], g_k[0])
    if g_t2 is None:
        return [g_sig, None]
    g_q = np.zeros((len(PARAMS),) + g_t2.shape)
    g_q[PARAMS.index("t2")] = g_t2
    g_q[PARAMS.index("t2_prime")] = g_t2p
    return [g_sig, g_q]


def _adj_ifft2(saved, g_x):
    # unitary: adjoint of ifft2 is fft2
    return [fft2(g_x[0])]


def _adj_abs(saved, g_m):
    x = saved["x"]
    mag = np.abs(x)
    # subgradient 0 where the magnitude vanishes
    phase = np.divide(x, mag, out=np.zeros_like(x), where=mag > 0)
    return [g_m[0] * phase]


def _adj_loss(saved, g_l):
    return [2.0 * g_l[0] * w[:, None, None] * r for r, w in zip(saved["residuals"], saved["weights"])]


ADJOINTS = {
    "mix": _adj_mix,
    "epg": _adj_epg,
    "encode": _adj_encode,
    "ifft2": _adj_ifft2,
    "abs": _adj_abs,
    "loss": _adj_loss,
}


# ---------------------------------------------------------------------------
# forward / backward


def _mix_stack(p: np.ndarray, table: TissueTable, pd_floor: float) -> QuantitativeMaps:
    # no range check: finite differences may step slightly outside [0, 1]
    q = np.tensordot(table.matrix(), p, axes=(1, 0))
    return QuantitativeMaps(*q, background_mask=q[PARAMS.index("pd")] < pd_floor)


def forward(
    maps,
    table: TissueTable,
    programs,
    observed: ContrastStack,
    spec: LossSpec = LossSpec(),
    mode: str = "idealized",
    threads: int = 1,
    pd_floor: float = DEFAULT_PD_FLOOR,
) -> tuple[float, Tape]:
    """Loss of ``maps`` against ``observed`` and the tape to differentiate it.

    ``maps`` is a ProbabilityMaps or a (3, h, w) array; ``programs`` are
    Sequences or CompiledPrograms in the order of ``observed``'s labels.
    """
    p = maps.stack() if isinstance(maps, ProbabilityMaps) else np.asarray(maps, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] != 3:
        raise ValidationError(f"maps must be (3, h, w), got {p.shape}")
    programs = [pr if isinstance(pr, CompiledProgram) else compile_program(pr) for pr in programs]
    tape = Tape()
    tape.values["maps"] = p
    q = _mix_stack(p, table, pd_floor)
    qarr = np.stack([q.param(n) for n in PARAMS])
    tape.record("mix", ["maps"], ["q"], [qarr], table=table)

    outs, labels = [], []
    for i, prog in enumerate(programs):
        vs = voxel_signals(q, prog, tangents=True, threads=threads)
        tape.record("epg", ["q"], [f"sig{i}"], [vs.sig], vs=vs, shape=q.shape)
        k = encode(prog, vs, q, mode)
        tape.record("encode", [f"sig{i}", "q"], [f"k{i}"], [k], prog=prog, vs=vs, qmaps=q, mode=mode)
        if spec.domain == "image":
            x = ifft2(k)
            tape.record("ifft2", [f"k{i}"], [f"x{i}"], [x])
            img = np.abs(x)
            tape.record("abs", [f"x{i}"], [f"img{i}"], [img], x=x)
            outs.append(f"img{i}")
        else:
            outs.append(f"k{i}")
        labels += [(prog.name, c) for c in range(prog.n_contrasts)]

    if tuple(labels) != tuple(observed.labels):
        raise ValidationError(f"sequence contrasts {labels} do not match observed labels {list(observed.labels)}")
    obs = observed.images if spec.domain == "image" else observed.kspace
    w_all = spec.weight_array(len(labels))
    residuals, total, start = [], 0.0, 0
    w_parts = []
    for name in outs:
        sim = tape.values[name]
        n = sim.shape[0]
        r = sim - obs[start:start + n]
        w = w_all[start:start + n]
        total += float(np.sum(w * (np.abs(r) ** 2).sum(axis=(1, 2))))
        residuals.append(r)
        w_parts.append(w)
        start += n
    if not np.isfinite(total):
        raise NumericalError(f"non-finite loss {total}")
    tape.record("loss", outs, ["loss"], [total], residuals=residuals, weights=w_parts)
    tape.loss_var = "loss"
    return total, tape


def backward(tape: Tape, loss_adjoint: float = 1.0) -> GradientMaps:
    if not tape.complete:
        raise TapeError("tape has no completed forward pass")
    grads: dict[str, object] = {tape.loss_var: float(loss_adjoint)}
    for rec in reversed(tape.records):
        g_out = [grads.get(o) for o in rec.outputs]
        if all(g is None for g in g_out):
            continue
        g_in = ADJOINTS[rec.op](rec.saved, g_out)
        for name, g in zip(rec.inputs, g_in):
            if g is None:
                continue
            grads[name] = g if grads.get(name) is None else grads[name] + g
    g = grads.get("maps")
    if g is None:
        g = np.zeros_like(tape.values["maps"])
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient")
    return GradientMaps.from_stack(g)


def loss_and_grad(maps, table, programs, observed, spec=LossSpec(), mode="idealized", threads=1, pd_floor=DEFAULT_PD_FLOOR):
    value, tape = forward(maps, table, programs, observed, spec, mode, threads, pd_floor)
    return value, backward(tape).stack()


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradcheckReport:
    rows: list  # (flat coordinate, analytic, numeric, relative error)

    @property
    def max_rel_err(self) -> float:
        return max((r[3] for r in self.rows), default=0.0)

    def table(self) -> str:
        lines = [f"{'coord':>8} {'analytic':>22} {'numeric':>22} {'rel_err':>10}"]
        for c, a, n, e in self.rows:
            lines.append(f"{c:>8d} {a:>22.14e} {n:>22.14e} {e:>10.2e}")
        lines.append(f"max rel err: {self.max_rel_err:.3e}")
        return "\n".join(lines)


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradcheck(fn, params, eps: float = 1e-4, n_coords: int = 32, seed: int = 0) -> GradcheckReport:
    """Compare the analytic gradient of ``fn`` with central differences.

    ``fn(params) -> (value, gradient)``. Checks every coordinate when there
    are at most ``n_coords``, otherwise a seeded random subset of that size
    (never fewer than 32).
    """
    x0 = np.array(params, dtype=np.float64)
    _, g = fn(x0.copy())
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    n = x0.size
    k = max(32, n_coords)
    coords = np.arange(n) if n <= k else np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    rows = []
    flat = x0.reshape(-1)
    for c in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[c] += eps
        xm[c] -= eps
        fp, _ = fn(xp.reshape(x0.shape))
        fm, _ = fn(xm.reshape(x0.shape))
        num = (fp - fm) / (2 * eps)
        rows.append((int(c), float(g[c]), float(num), rel_err(g[c], num)))
    return GradcheckReport(rows)


def chain_closure(table, programs, observed, spec=LossSpec(), mode="idealized", threads=1):
    """``params -> (loss, grad)`` over a (3, h, w) probability stack."""
    programs = [pr if isinstance(pr, CompiledProgram) else compile_program(pr) for pr in programs]

    def fn(p):
        return loss_and_grad(p, table, programs, observed, spec, mode, threads)

    return fn
