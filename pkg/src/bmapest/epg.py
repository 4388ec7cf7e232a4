"""Extended Phase Graph state and operators for a single voxel (or a batch).

States hold the configuration orders n = 0..K of F+, F- and Z. Arrays may
carry leading batch dimensions ``(..., K+1)``; every operator acts
independently on each batch entry.

Conventions
-----------
* ``F+_n = int M_xy(z) exp(-2 pi i n z) dz`` and ``F-_n = conj(F+_{-n})``;
  in particular ``F-_0 = conj(F+_0)`` and ``Z_0`` is real for any state
  reached from equilibrium. ``M_xy = M_x + i M_y``.
* RF rotations are right-handed about the axis ``(cos phi, sin phi, 0)``.
  In the scaled basis ``(F+/sqrt2, F-/sqrt2, Z)`` every RF matrix is unitary,
  so ``|F+_n|^2/2 + |F-_n|^2/2 + |Z_n|^2`` is conserved per order.
* A gradient of integer moment ``delta_n`` adds ``2 pi delta_n z`` to the
  transverse phase: ``F+_n -> F+_{n+delta_n}``. Orders crossing n = 0 swap
  between F+ and F- with a complex conjugate. The shift is therefore
  real-linear, not complex-linear; adjoints use the real inner product
  ``Re <a, b>``.
* The detected signal is ``F+_0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from bmapest.errors import ValidationError
from bmapest.sequence import Adc, Diffuse, Grad, Pulse, Spoil, Wait


@dataclass(frozen=True)
class EpgState:
    f_plus: np.ndarray
    f_minus: np.ndarray
    z: np.ndarray
    m0: float | np.ndarray = 1.0
    dropped: int = 0  # configuration orders lost off the end or pruned
    dropped_mass: float = 0.0  # summed magnitude of what was discarded

    @property
    def capacity(self) -> int:
        return self.f_plus.shape[-1] - 1

    def as_array(self) -> np.ndarray:
        """(..., 3, K+1) stack of F+, F-, Z."""
        return np.stack([self.f_plus, self.f_minus, self.z], axis=-2)

    @classmethod
    def from_array(cls, arr, m0=1.0) -> "EpgState":
        arr = np.asarray(arr, dtype=np.complex128)
        return cls(arr[..., 0, :].copy(), arr[..., 1, :].copy(), arr[..., 2, :].copy(), m0)

    def transverse_energy(self):
        return np.sum(np.abs(self.f_plus) ** 2 + np.abs(self.f_minus) ** 2, axis=-1)


def equilibrium(m0=1.0, capacity: int = 4) -> EpgState:
    """Thermal equilibrium: Z_0 = m0, everything else zero."""
    if capacity < 1:
        raise ValidationError(f"capacity must be >= 1, got {capacity}")
    m0a = np.asarray(m0, dtype=np.float64)
    if np.any(m0a < 0):
        raise ValidationError("m0 must be non-negative")
    shape = m0a.shape + (capacity + 1,)
    z = np.zeros(shape, dtype=np.complex128)
    z[..., 0] = m0a
    return EpgState(np.zeros(shape, np.complex128), np.zeros(shape, np.complex128), z, m0)


def rf_matrix(alpha: float, phi: float) -> np.ndarray:
    """3x3 mixing matrix acting on (F+_n, F-_n, Z_n)."""
    c2 = math.cos(alpha / 2) ** 2
    s2 = math.sin(alpha / 2) ** 2
    sa = math.sin(alpha)
    e = complex(math.cos(phi), math.sin(phi))
    return np.array(
        [
            [c2, e * e * s2, -1j * e * sa],
            [s2 / (e * e), c2, 1j * sa / e],
            [-0.5j * sa / e, 0.5j * e * sa, math.cos(alpha)],
        ]
    )


def _apply3(mat, state: EpgState) -> EpgState:
    fp, fm, z = state.f_plus, state.f_minus, state.z
    return replace(
        state,
        f_plus=mat[0, 0] * fp + mat[0, 1] * fm + mat[0, 2] * z,
        f_minus=mat[1, 0] * fp + mat[1, 1] * fm + mat[1, 2] * z,
        z=mat[2, 0] * fp + mat[2, 1] * fm + mat[2, 2] * z,
    )


def rf_pulse(state: EpgState, alpha: float, phi: float = 0.0) -> EpgState:
    return _apply3(rf_matrix(alpha, phi), state)


def rf_pulse_adjoint(adj: EpgState, alpha: float, phi: float = 0.0) -> EpgState:
    return _apply3(rf_matrix(alpha, phi).conj().T, adj)


def precess(state: EpgState, theta: float) -> EpgState:
    e = complex(math.cos(theta), math.sin(theta))
    return replace(state, f_plus=state.f_plus * e, f_minus=state.f_minus / e)


def precess_adjoint(adj: EpgState, theta: float) -> EpgState:
    return precess(adj, -theta)


def _relax_factors(t, t1, t2):
    if np.any(np.asarray(t) < 0):
        raise ValidationError(f"relaxation interval must be >= 0, got {t}")
    e1 = np.exp(-np.asarray(t, dtype=np.float64) / np.asarray(t1, dtype=np.float64))
    e2 = np.exp(-np.asarray(t, dtype=np.float64) / np.asarray(t2, dtype=np.float64))
    return e1[..., None], e2[..., None]


def relax(state: EpgState, t, t1, t2) -> EpgState:
    """Free relaxation over ``t`` ms; Z_0 recovers towards ``state.m0``."""
    e1, e2 = _relax_factors(t, t1, t2)
    z = state.z * e1
    z[..., 0] += np.asarray(state.m0) * (1.0 - e1[..., 0])
    return replace(state, f_plus=state.f_plus * e2, f_minus=state.f_minus * e2, z=z)


def relax_adjoint(adj: EpgState, t, t1, t2) -> EpgState:
    """Adjoint of the linear part of :func:`relax` (the recovery term is constant)."""
    e1, e2 = _relax_factors(t, t1, t2)
    return replace(adj, f_plus=adj.f_plus * e2, f_minus=adj.f_minus * e2, z=adj.z * e1)


def _unfold(state: EpgState) -> np.ndarray:
    """Transverse orders -K..K as one array (index K is order 0)."""
    k = state.capacity
    neg = np.conj(state.f_minus[..., 1:][..., ::-1])  # orders -K..-1
    return np.concatenate([neg, state.f_plus], axis=-1), k


def _fold(full: np.ndarray, k: int):
    f_plus = full[..., k:].copy()
    f_minus = np.conj(full[..., : k + 1][..., ::-1])
    return f_plus, f_minus


def grad_shift(state: EpgState, delta_n: int) -> EpgState:
    """Dephase by ``delta_n`` orders; orders pushed past capacity are dropped."""
    delta_n = int(delta_n)
    if delta_n == 0:
        return state
    full, k = _unfold(state)
    width = full.shape[-1]
    shifted = np.zeros_like(full)
    lost = 0
    mass = 0.0
    if abs(delta_n) >= width:
        gone = full
    elif delta_n > 0:
        shifted[..., delta_n:] = full[..., :-delta_n]
        gone = full[..., -delta_n:]
    else:
        shifted[..., :delta_n] = full[..., -delta_n:]
        gone = full[..., :-delta_n]
    if gone.size:
        mag = np.abs(gone)
        lost = int(np.count_nonzero(mag))
        mass = float(mag.sum())
    f_plus, f_minus = _fold(shifted, k)
    return replace(
        state, f_plus=f_plus, f_minus=f_minus,
        dropped=state.dropped + lost, dropped_mass=state.dropped_mass + mass,
    )


def grad_shift_adjoint(adj: EpgState, delta_n: int) -> EpgState:
    """Adjoint of :func:`grad_shift` under ``Re <a, b>``.

    The unfold/fold pair is an isometry up to the doubled order-0 entry,
    so the adjoint is the opposite shift with orders crossing zero handled
    by the same fold; F-_0 sensitivity folds into F+_0.
    """
    delta_n = int(delta_n)
    if delta_n == 0:
        return adj
    k = adj.capacity
    # gradient w.r.t. the unfolded input: F+ part at orders >= 0, conj(F-) at <= 0
    g = np.zeros(adj.f_plus.shape[:-1] + (2 * k + 1,), dtype=np.complex128)
    g[..., k:] += adj.f_plus
    g[..., : k + 1] += np.conj(adj.f_minus[..., ::-1])
    # shift back
    back = np.zeros_like(g)
    w = g.shape[-1]
    if abs(delta_n) < w:
        if delta_n > 0:
            back[..., :-delta_n] = g[..., delta_n:]
        else:
            back[..., -delta_n:] = g[..., :delta_n]
    # unfold's adjoint: orders >=0 -> F+, orders <0 -> conj into F-_{1..K}
    f_plus = back[..., k:].copy()
    f_minus = np.zeros_like(adj.f_minus)
    f_minus[..., 1:] = np.conj(back[..., :k][..., ::-1])
    return replace(adj, f_plus=f_plus, f_minus=f_minus)


def spoil(state: EpgState) -> EpgState:
    """Ideal spoiler: all transverse states destroyed, Z untouched."""
    return replace(state, f_plus=np.zeros_like(state.f_plus), f_minus=np.zeros_like(state.f_minus))


def prune(state: EpgState, epsilon: float) -> EpgState:
    """Zero every order n with |F+_n| + |F-_n| + |Z_n| < epsilon.

    Zeroed magnitude is added to ``dropped_mass``; since RF is unitary in the
    scaled basis and relaxation/shifts are non-expansive, the accumulated
    mass bounds (times sqrt 2) how far any later signal can move.
    """
    if epsilon < 0:
        raise ValidationError(f"epsilon must be >= 0, got {epsilon}")
    mag = np.abs(state.f_plus) + np.abs(state.f_minus) + np.abs(state.z)
    cut = (mag < epsilon) & (mag > 0)
    if not cut.any():
        return state
    keep = ~cut
    return replace(
        state,
        f_plus=state.f_plus * keep, f_minus=state.f_minus * keep, z=state.z * keep,
        dropped=state.dropped + int(cut.sum()), dropped_mass=state.dropped_mass + float(mag[cut].sum()),
    )


def signal(state: EpgState):
    return state.f_plus[..., 0]


def diffuse(state: EpgState, b: float, d) -> EpgState:
    a = np.exp(-b * np.asarray(d, dtype=np.float64))[..., None]
    return replace(state, f_plus=state.f_plus * a, f_minus=state.f_minus * a, z=state.z * a)


def reachable_order(events) -> int:
    """Highest configuration order any state can occupy under ``events``.

    Interval analysis: RF mixes the F and Z order ranges, a gradient widens
    the F range by |delta_n|, a spoiler empties it. Never exceeds the total
    gradient moment, usually far smaller (spoiled FLASH gives 1).
    """
    f_hi, z_hi, best = -1, 0, 0
    for e in events:
        if isinstance(e, Pulse):
            f_hi = z_hi = max(f_hi, z_hi)
        elif isinstance(e, Grad):
            if f_hi >= 0:
                f_hi += abs(int(e.delta_n))
        elif isinstance(e, Spoil):
            f_hi = -1
        best = max(best, f_hi, z_hi)
    return best


def default_capacity(events) -> int:
    return max(1, reachable_order(events))


def run_program(events, t1, t2, m0=1.0, capacity: int | None = None, d=0.0, epsilon: float = 0.0):
    """Drive an equilibrium state through ``events``.

    Returns ``(signals, state)`` where ``signals`` has one entry per ``Adc``
    event (last axis): ``F+_0`` demodulated by the receiver phase. ``t1``,
    ``t2``, ``m0``, ``d`` may be arrays (a batch of voxels).
    """
    events = list(events)
    if capacity is None:
        capacity = default_capacity(events)
    batch = np.broadcast_shapes(np.shape(t1), np.shape(t2), np.shape(m0), np.shape(d))
    m0 = np.broadcast_to(np.asarray(m0, dtype=np.float64), batch) if batch else m0
    state = equilibrium(m0, capacity)
    out = []
    for e in events:
        if isinstance(e, Pulse):
            state = rf_pulse(state, e.alpha, e.phi)
        elif isinstance(e, Wait):
            state = relax(state, e.t, t1, t2)
        elif isinstance(e, Grad):
            state = grad_shift(state, e.delta_n)
        elif isinstance(e, Spoil):
            state = spoil(state)
        elif isinstance(e, Diffuse):
            state = diffuse(state, e.b, d)
        elif isinstance(e, Adc):
            out.append(signal(state) * complex(math.cos(e.phase), -math.sin(e.phase)))
            continue
        else:
            raise ValidationError(f"unknown event {e!r}")
        if epsilon > 0:
            state = prune(state, epsilon)
    sig = np.stack(out, axis=-1) if out else np.zeros(np.shape(signal(state)) + (0,), np.complex128)
    return sig, state


# ---------------------------------------------------------------------------
# brute-force oracle


def _check_integer_moment(e):
    dn = e.delta_n
    if isinstance(dn, (bool, np.bool_)) or not float(dn).is_integer():
        raise ValidationError(f"isochromat oracle needs integer gradient moments, got {dn!r}")
    return int(dn)


def isochromat_oracle(events, n_isochromats: int, t1: float, t2: float, m0: float = 1.0, d: float = 0.0):
    """Bloch-simulate ``n_isochromats`` spins spread over one dephasing cycle.

    Spin j sits at position z_j = j / N; a gradient of moment ``delta_n``
    rotates its transverse phase by 2 pi delta_n z_j. Returns the mean
    transverse magnetization at every ``Adc`` (receiver-demodulated).
    """
    if n_isochromats < 64:
        raise ValidationError(f"need at least 64 isochromats, got {n_isochromats}")
    pos = np.arange(n_isochromats) / n_isochromats
    mxy = np.zeros(n_isochromats, dtype=np.complex128)
    mz = np.full(n_isochromats, float(m0))
    out = []
    for e in events:
        if isinstance(e, Pulse):
            a, phi = e.alpha, e.phi
            ux, uy = math.cos(phi), math.sin(phi)
            ca, sa = math.cos(a), math.sin(a)
            mx, my = mxy.real, mxy.imag
            # Rodrigues rotation about (ux, uy, 0)
            dot = ux * mx + uy * my
            cx = uy * mz  # (u x m)_x
            cy = -ux * mz
            cz = ux * my - uy * mx
            nx = mx * ca + cx * sa + ux * dot * (1 - ca)
            ny = my * ca + cy * sa + uy * dot * (1 - ca)
            nz = mz * ca + cz * sa
            mxy = nx + 1j * ny
            mz = nz
        elif isinstance(e, Wait):
            if e.t < 0:
                raise ValidationError("negative wait")
            e1, e2 = math.exp(-e.t / t1), math.exp(-e.t / t2)
            mxy = mxy * e2
            mz = mz * e1 + m0 * (1 - e1)
        elif isinstance(e, Grad):
            dn = _check_integer_moment(e)
            mxy = mxy * np.exp(2j * math.pi * dn * pos)
        elif isinstance(e, Spoil):
            mxy = np.zeros_like(mxy)
        elif isinstance(e, Diffuse):
            a = math.exp(-e.b * d)
            mxy, mz = mxy * a, mz * a
        elif isinstance(e, Adc):
            out.append(mxy.mean() * complex(math.cos(e.phase), -math.sin(e.phase)))
        else:
            raise ValidationError(f"unknown event {e!r}")
    return np.array(out, dtype=np.complex128)
