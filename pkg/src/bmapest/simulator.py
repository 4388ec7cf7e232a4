"""Forward model: quantitative maps + sequence -> k-space -> magnitude images.

Each non-background voxel runs its own EPG state through the sequence (a
compiled numba kernel). Every readout records the voxel's demodulated echo
``F+_0 * exp(-TE/T2')``; the voxel then contributes that echo, times its
spatial encoding phase ``exp(-2 pi i (kx x/nx + ky y/ny)) / sqrt(nx ny)``,
to each sample of the line. With the 1/sqrt(N) factor the encoding of a
line-invariant echo image is exactly the unitary DFT, so reconstruction
with the unitary inverse FFT returns the echo-amplitude image.

The kernel can also carry forward-mode tangents of every recorded echo with
respect to the voxel's (t1, t2, t2', pd, d); :mod:`bmapest.grad` uses them as
the saved Jacobian of the simulation stage.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from bmapest.epg import default_capacity, rf_matrix
from bmapest.errors import ValidationError
from bmapest.fft import dft_matrix, fft2, ifft2, is_power_of_two
from bmapest.phantom import BMAP_MAGIC, ProbabilityMaps, QuantitativeMaps, TissueTable, mix, write_bmap
from bmapest.sequence import Adc, Diffuse, Grad, Pulse, Sequence, Spoil, Wait

MODES = ("idealized", "intra_readout_decay")

OP_PULSE, OP_WAIT, OP_GRAD, OP_SPOIL, OP_DIFFUSE, OP_READ = range(6)
N_TANGENTS = 5  # t1, t2, t2_prime, pd, d -- same order as phantom.PARAMS


@dataclass(frozen=True)
class CompiledProgram:
    """Flat arrays the voxel kernel consumes, plus the slot -> k-space map."""

    name: str
    matrix: tuple[int, int]
    n_contrasts: int
    ops: np.ndarray  # int64 opcode per step
    arg: np.ndarray  # float64: wait t / grad delta_n / diffusion b / read TE
    rf: np.ndarray  # complex (n_ops, 3, 3) RF matrices (zero for non-pulses)
    rx: np.ndarray  # complex receiver demodulation factor per step
    slot: np.ndarray  # int64 slot index for READ steps, -1 otherwise
    n_slots: int
    line_slot: np.ndarray  # (n_contrasts, ny) slot holding each k-space line
    dt: np.ndarray  # (n_contrasts, ny, nx) sample offset from echo centre, ms
    capacity: int


def compile_program(seq: Sequence, capacity: int | None = None) -> CompiledProgram:
    nx, ny = seq.matrix
    n = len(seq.events)
    ops = np.full(n, -1, dtype=np.int64)
    arg = np.zeros(n)
    rf = np.zeros((n, 3, 3), dtype=np.complex128)
    rx = np.zeros(n, dtype=np.complex128)
    slot = np.full(n, -1, dtype=np.int64)
    line_slot = np.full((seq.n_contrasts, ny), -1, dtype=np.int64)
    dt = np.zeros((seq.n_contrasts, ny, nx))
    filled = np.zeros((seq.n_contrasts, ny, nx), dtype=bool)
    k = 0
    n_slots = 0
    open_key = None  # (contrast, line, te, phase) of the readout being recorded
    for e in seq.events:
        if isinstance(e, Adc):
            key = (e.contrast, e.line, e.t_since_excitation, e.phase)
            if key != open_key:
                if line_slot[e.contrast, e.line] != -1:
                    raise ValidationError(
                        f"{seq.name}: line {e.line} of contrast {e.contrast} is split across readouts"
                    )
                ops[k] = OP_READ
                arg[k] = e.t_since_excitation
                rx[k] = complex(math.cos(e.phase), -math.sin(e.phase))
                slot[k] = n_slots
                line_slot[e.contrast, e.line] = n_slots
                n_slots += 1
                k += 1
                open_key = key
            if filled[e.contrast, e.line, e.sample]:
                raise ValidationError(f"{seq.name}: duplicate sample {e}")
            filled[e.contrast, e.line, e.sample] = True
            dt[e.contrast, e.line, e.sample] = e.dt
            continue
        open_key = None
        if isinstance(e, Pulse):
            ops[k] = OP_PULSE
            rf[k] = rf_matrix(e.alpha, e.phi)
        elif isinstance(e, Wait):
            ops[k] = OP_WAIT
            arg[k] = e.t
        elif isinstance(e, Grad):
            if e.delta_n == 0:
                continue
            ops[k] = OP_GRAD
            arg[k] = e.delta_n
        elif isinstance(e, Spoil):
            ops[k] = OP_SPOIL
        elif isinstance(e, Diffuse):
            ops[k] = OP_DIFFUSE
            arg[k] = e.b
        else:
            raise ValidationError(f"unknown event {e!r}")
        k += 1
    if not filled.all():
        raise ValidationError(f"{seq.name}: k-space not fully sampled for every contrast")
    return CompiledProgram(
        name=seq.name, matrix=(nx, ny), n_contrasts=seq.n_contrasts,
        ops=ops[:k].copy(), arg=arg[:k].copy(), rf=rf[:k].copy(), rx=rx[:k].copy(), slot=slot[:k].copy(),
        n_slots=n_slots, line_slot=line_slot, dt=dt,
        capacity=default_capacity(seq.events) if capacity is None else int(capacity),
    )


# ---------------------------------------------------------------------------
# voxel kernel


@numba.njit(cache=True, nogil=True)
def _shift(fp, fm, c, dn, k, full, out):
    # unfold orders -k..k, shift by dn, fold back (conjugating across n = 0)
    w = 2 * k + 1
    for n in range(k + 1):
        full[k + n] = fp[c, n]
    for n in range(1, k + 1):
        full[k - n] = np.conj(fm[c, n])
    for j in range(w):
        out[j] = 0.0
    for j in range(w):
        t = j + dn
        if 0 <= t < w:
            out[t] = full[j]
    for n in range(k + 1):
        fp[c, n] = out[k + n]
        fm[c, n] = np.conj(out[k - n])


@numba.njit(cache=True, nogil=True)
def _kernel(ops, arg, rf, rx, slot, k, t1, t2, t2p, m0, dd, v_lo, v_hi, tangents, out_sig, out_tan):
    nk = k + 1
    nc = 5 if tangents else 1  # copy 0: state, 1..4: d/dt1, d/dt2, d/dm0, d/dd
    fp = np.zeros((nc, nk), dtype=np.complex128)
    fm = np.zeros((nc, nk), dtype=np.complex128)
    z = np.zeros((nc, nk), dtype=np.complex128)
    full = np.zeros(2 * k + 1, dtype=np.complex128)
    buf = np.zeros(2 * k + 1, dtype=np.complex128)
    for v in range(v_lo, v_hi):
        T1 = t1[v]
        T2 = t2[v]
        M0 = m0[v]
        D = dd[v]
        fp[:, :] = 0.0
        fm[:, :] = 0.0
        z[:, :] = 0.0
        z[0, 0] = M0
        if tangents:
            z[3, 0] = 1.0
        for i in range(ops.shape[0]):
            op = ops[i]
            if op == OP_PULSE:
                r = rf[i]
                for c in range(nc):
                    for n in range(nk):
                        a = fp[c, n]
                        b = fm[c, n]
                        q = z[c, n]
                        fp[c, n] = r[0, 0] * a + r[0, 1] * b + r[0, 2] * q
                        fm[c, n] = r[1, 0] * a + r[1, 1] * b + r[1, 2] * q
                        z[c, n] = r[2, 0] * a + r[2, 1] * b + r[2, 2] * q
            elif op == OP_WAIT:
                t = arg[i]
                e1 = math.exp(-t / T1)
                e2 = math.exp(-t / T2)
                if tangents:
                    de1 = e1 * t / (T1 * T1)
                    de2 = e2 * t / (T2 * T2)
                    for n in range(nk):
                        # d/dt1
                        fp[1, n] *= e2
                        fm[1, n] *= e2
                        z[1, n] = e1 * z[1, n] + de1 * z[0, n]
                        # d/dt2
                        fp[2, n] = e2 * fp[2, n] + de2 * fp[0, n]
                        fm[2, n] = e2 * fm[2, n] + de2 * fm[0, n]
                        z[2, n] *= e1
                        for c in range(3, 5):
                            fp[c, n] *= e2
                            fm[c, n] *= e2
                            z[c, n] *= e1
                    z[1, 0] -= M0 * de1
                    z[3, 0] += 1.0 - e1
                for n in range(nk):
                    fp[0, n] *= e2
                    fm[0, n] *= e2
                    z[0, n] *= e1
                z[0, 0] += M0 * (1.0 - e1)
            elif op == OP_GRAD:
                dn = int(arg[i])
                for c in range(nc):
                    _shift(fp, fm, c, dn, k, full, buf)
            elif op == OP_SPOIL:
                fp[:, :] = 0.0
                fm[:, :] = 0.0
            elif op == OP_DIFFUSE:
                b = arg[i]
                att = math.exp(-b * D)
                if tangents:
                    for n in range(nk):
                        fp[4, n] = att * fp[4, n] - b * att * fp[0, n]
                        fm[4, n] = att * fm[4, n] - b * att * fm[0, n]
                        z[4, n] = att * z[4, n] - b * att * z[0, n]
                    for c in range(1, 4):
                        for n in range(nk):
                            fp[c, n] *= att
                            fm[c, n] *= att
                            z[c, n] *= att
                for n in range(nk):
                    fp[0, n] *= att
                    fm[0, n] *= att
                    z[0, n] *= att
            elif op == OP_READ:
                s = slot[i]
                te = arg[i]
                g = rx[i] * math.exp(-te / t2p[v])
                out_sig[v, s] = fp[0, 0] * g
                if tangents:
                    out_tan[v, s, 0] = fp[1, 0] * g
                    out_tan[v, s, 1] = fp[2, 0] * g
                    out_tan[v, s, 2] = fp[0, 0] * g * te / (t2p[v] * t2p[v])
                    out_tan[v, s, 3] = fp[3, 0] * g
                    out_tan[v, s, 4] = fp[4, 0] * g


@dataclass
class VoxelSignals:
    """Echo of every active voxel at every readout slot of one program."""

    active: np.ndarray  # flat pixel indices simulated (non-background)
    sig: np.ndarray  # (n_active, n_slots) complex
    tan: np.ndarray | None  # (n_active, n_slots, 5) complex or None


def _chunks(n: int, parts: int):
    parts = max(1, min(parts, n)) if n else 1
    edges = np.linspace(0, n, parts + 1).astype(int)
    return list(zip(edges[:-1], edges[1:]))


def voxel_signals(qmaps: QuantitativeMaps, prog: CompiledProgram, tangents: bool = False, threads: int = 1) -> VoxelSignals:
    """Run the EPG kernel for every non-background voxel.

    Voxels are independent; with ``threads > 1`` contiguous voxel ranges run
    concurrently and write disjoint rows, so results do not depend on the
    thread count.
    """
    nx, ny = prog.matrix
    if qmaps.shape != (ny, nx):
        raise ValidationError(f"map dims {qmaps.shape[::-1]} do not match sequence matrix {prog.matrix}")
    params = [qmaps.qt1, qmaps.qt2, qmaps.qt2_prime, qmaps.pd, qmaps.d]
    if any(not np.all(np.isfinite(p)) for p in params):
        raise ValidationError("quantitative maps contain NaN or inf")
    active = np.flatnonzero(~qmaps.background_mask.reshape(-1))
    t1, t2, t2p, pd, d = (np.ascontiguousarray(p.reshape(-1)[active]) for p in params)
    if active.size and (t1.min() <= 0 or t2.min() <= 0 or t2p.min() <= 0):
        raise ValidationError("non-positive relaxation time in a non-background voxel")
    nv = active.size
    sig = np.zeros((nv, prog.n_slots), dtype=np.complex128)
    tan = np.zeros((nv, prog.n_slots, N_TANGENTS), dtype=np.complex128) if tangents else np.zeros((1, 1, 1), np.complex128)
    args = (prog.ops, prog.arg, prog.rf, prog.rx, prog.slot, prog.capacity, t1, t2, t2p, pd, d)
    ranges = _chunks(nv, threads)
    if threads <= 1 or len(ranges) == 1:
        for lo, hi in ranges:
            _kernel(*args, lo, hi, tangents, sig, tan)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda r: _kernel(*args, r[0], r[1], tangents, sig, tan), ranges))
    return VoxelSignals(active=active, sig=sig, tan=tan if tangents else None)


# ---------------------------------------------------------------------------
# explicit Cartesian encoding


@dataclass(frozen=True)
class KSpace:
    data: np.ndarray  # (contrasts, ny, nx) complex, FFT order

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class Image:
    data: np.ndarray  # (contrasts, ny, nx) magnitude


def _line_images(prog: CompiledProgram, vs: VoxelSignals, c: int) -> np.ndarray:
    """(ny_lines, ny, nx) echo image seen by each k-space line of contrast c."""
    nx, ny = prog.matrix
    out = np.zeros((ny, ny * nx), dtype=np.complex128)
    out[:, vs.active] = vs.sig[:, prog.line_slot[c]].T
    return out.reshape(ny, ny, nx)


def _decay(prog, qmaps, c):
    """(ny_lines, ny, nx, nx_k) intra-readout T2* decay factors."""
    r = 1.0 / qmaps.t2_star()  # (ny, nx)
    return np.exp(-prog.dt[c][:, None, None, :] * r[None, :, :, None])


def encode(prog: CompiledProgram, vs: VoxelSignals, qmaps: QuantitativeMaps, mode: str = "idealized") -> np.ndarray:
    if mode not in MODES:
        raise ValidationError(f"unknown simulation mode {mode!r}; use one of {MODES}")
    nx, ny = prog.matrix
    fx = dft_matrix(nx)
    fy = dft_matrix(ny)
    scale = 1.0 / math.sqrt(nx * ny)
    out = np.zeros((prog.n_contrasts, ny, nx), dtype=np.complex128)
    for c in range(prog.n_contrasts):
        s = _line_images(prog, vs, c)
        if mode == "idealized":
            a = s @ fx.T  # [line, y, kx]
        else:
            a = np.einsum("lyx,lyxk,kx->lyk", s, _decay(prog, qmaps, c), fx)
        out[c] = np.einsum("ly,lyk->lk", fy, a) * scale
    return out


def encode_adjoint(prog: CompiledProgram, vs: VoxelSignals, qmaps: QuantitativeMaps, mode: str, g_k: np.ndarray):
    """Pull a k-space gradient back to voxel echoes (and T2 maps, for decay).

    Returns ``(g_sig, g_t2, g_t2p)``; the last two are ``None`` in idealized
    mode and otherwise (ny, nx) arrays of dL/dqt2, dL/dqt2'.
    """
    nx, ny = prog.matrix
    fx = dft_matrix(nx)
    fy = dft_matrix(ny)
    scale = 1.0 / math.sqrt(nx * ny)
    g_sig = np.zeros_like(vs.sig)
    g_t2 = g_t2p = None
    if mode != "idealized":
        g_r = np.zeros((ny, nx))
    for c in range(prog.n_contrasts):
        gk = g_k[c] * scale
        # d/d(a[l,y,k]) = conj(fy[l,y]) * gk[l,k]
        ga = np.conj(fy)[:, :, None] * gk[:, None, :]
        if mode == "idealized":
            gs = ga @ np.conj(fx)  # [l, y, x]
        else:
            dec = _decay(prog, qmaps, c)
            gs = np.einsum("lyk,lyxk,kx->lyx", ga, dec, np.conj(fx))
            s = _line_images(prog, vs, c)
            # dec = exp(-dt * r): d dec / d r = -dt * dec
            ddec = -prog.dt[c][:, None, None, :] * dec
            g_r += np.real(np.einsum("lyk,lyxk,kx,lyx->yx", np.conj(ga), ddec, fx, s))
        flat = gs.reshape(ny, ny * nx)[:, vs.active]  # [line, voxel]
        g_sig[:, prog.line_slot[c]] += flat.T  # slots are unique per (contrast, line)
    if mode != "idealized":
        # r = 1/t2 + 1/t2'
        g_t2 = -g_r / qmaps.qt2 ** 2
        g_t2p = -g_r / qmaps.qt2_prime ** 2
        g_t2 = np.where(qmaps.background_mask, 0.0, g_t2)
        g_t2p = np.where(qmaps.background_mask, 0.0, g_t2p)
    return g_sig, g_t2, g_t2p


# ---------------------------------------------------------------------------
# public operations


def simulate(qmaps: QuantitativeMaps, seq, mode: str = "idealized", threads: int = 1) -> KSpace:
    """K-space of every contrast of ``seq`` (a Sequence or CompiledProgram)."""
    if mode not in MODES:
        raise ValidationError(f"unknown simulation mode {mode!r}; use one of {MODES}")
    prog = seq if isinstance(seq, CompiledProgram) else compile_program(seq)
    vs = voxel_signals(qmaps, prog, tangents=False, threads=threads)
    return KSpace(encode(prog, vs, qmaps, mode))


def reconstruct(k: KSpace) -> Image:
    """Magnitude of the unitary inverse 2D FFT of every contrast."""
    data = np.asarray(k.data if isinstance(k, KSpace) else k)
    ny, nx = data.shape[-2:]
    if not (is_power_of_two(nx) and is_power_of_two(ny)):
        raise ValidationError(f"k-space {nx}x{ny} is not power-of-two sized; zero-pad to the next power of two")
    return Image(np.abs(ifft2(data)))


def echo_image(qmaps: QuantitativeMaps, seq, contrast: int = 0, line: int = 0) -> np.ndarray:
    """Complex per-voxel echo seen by one k-space line (DC line by default)."""
    prog = seq if isinstance(seq, CompiledProgram) else compile_program(seq)
    vs = voxel_signals(qmaps, prog)
    nx, ny = prog.matrix
    return _line_images(prog, vs, contrast)[line]


@dataclass(frozen=True)
class ContrastStack:
    """K-space and magnitude images of many contrasts, (sequence, echo) ordered."""

    labels: tuple  # ((sequence name, contrast index), ...)
    kspace: np.ndarray  # (C, ny, nx) complex
    images: np.ndarray  # (C, ny, nx) float

    def __len__(self):
        return len(self.labels)

    def select(self, labels) -> "ContrastStack":
        idx = [self.labels.index(tuple(l)) for l in labels]
        return ContrastStack(tuple(self.labels[i] for i in idx), self.kspace[idx], self.images[idx])


def simulate_stack(maps: ProbabilityMaps, table: TissueTable, sequences, mode: str = "idealized", threads: int = 1) -> ContrastStack:
    sequences = list(sequences)
    if not sequences:
        raise ValidationError("simulate_stack needs at least one sequence")
    qmaps = mix(maps, table)
    labels, ks = [], []
    for seq in sequences:
        k = simulate(qmaps, seq, mode, threads).data
        labels += [(seq.name, c) for c in range(k.shape[0])]
        ks.append(k)
    kspace = np.concatenate(ks)
    return ContrastStack(tuple(labels), kspace, reconstruct(KSpace(kspace)).data)


# ---------------------------------------------------------------------------
# export


def write_pgm(path, image: np.ndarray) -> None:
    """16-bit binary PGM (P5), scaled so the image maximum maps to 65535."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max() if img.size else 0.0
    scaled = np.zeros(img.shape) if peak <= 0 else img / peak * 65535.0
    data = np.rint(scaled).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(data.tobytes())


def write_stack(stack: ContrastStack, out_dir) -> None:
    """k-space (re/im channel pairs), images, labels and PGM previews."""
    os.makedirs(out_dir, exist_ok=True)
    k = stack.kspace
    write_bmap(os.path.join(out_dir, "kspace.bmap"), np.stack([k.real, k.imag], axis=1).reshape(-1, *k.shape[1:]))
    write_bmap(os.path.join(out_dir, "images.bmap"), stack.images)
    with open(os.path.join(out_dir, "labels.txt"), "w") as fh:
        for name, c in stack.labels:
            fh.write(f"{name} {c}\n")
    for (name, c), img in zip(stack.labels, stack.images):
        write_pgm(os.path.join(out_dir, f"{name}_e{c}.pgm"), img)


def read_stack(in_dir) -> ContrastStack:
    from bmapest.phantom import read_bmap

    labels = []
    with open(os.path.join(in_dir, "labels.txt")) as fh:
        for line in fh:
            if line.strip():
                name, c = line.split()
                labels.append((name, int(c)))
    kr = read_bmap(os.path.join(in_dir, "kspace.bmap"))
    if kr.shape[0] != 2 * len(labels):
        raise ValidationError(f"{in_dir}: kspace.bmap has {kr.shape[0]} channels for {len(labels)} labels")
    k = kr[0::2] + 1j * kr[1::2]
    images = read_bmap(os.path.join(in_dir, "images.bmap"))
    return ContrastStack(tuple(labels), k, images)


__all__ = [
    "BMAP_MAGIC", "CompiledProgram", "ContrastStack", "Image", "KSpace", "MODES", "VoxelSignals",
    "compile_program", "echo_image", "encode", "encode_adjoint", "fft2", "ifft2", "read_stack",
    "reconstruct", "simulate", "simulate_stack", "voxel_signals", "write_pgm", "write_stack",
]
