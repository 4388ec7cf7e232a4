"""Radix-2 FFT with unitary normalization.

Iterative decimation-in-time over the last axis, vectorized across any
leading axes. ``fft``/``ifft`` scale by 1/sqrt(N) so both are unitary and
each is the adjoint (and inverse) of the other.
"""

from __future__ import annotations

import numpy as np

from bmapest.errors import ValidationError


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_last(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise ValidationError(f"FFT length {n} is not a power of two; zero-pad to {1 << max(0, (n - 1).bit_length())}")
    a = np.asarray(x, dtype=np.complex128)[..., _bit_reverse(n)]
    m = 1
    while m < n:
        tw = np.exp(sign * 1j * np.pi * np.arange(m) / m)
        a = a.reshape(a.shape[:-1] + (n // (2 * m), 2, m))
        even = a[..., 0, :]
        odd = a[..., 1, :] * tw
        a = np.stack([even + odd, even - odd], axis=-2).reshape(a.shape[:-3] + (n,))
        m *= 2
    return a / np.sqrt(n)


def fft(x, axis: int = -1) -> np.ndarray:
    x = np.moveaxis(np.asarray(x), axis, -1)
    return np.moveaxis(_fft_last(x, -1), -1, axis)


def ifft(x, axis: int = -1) -> np.ndarray:
    x = np.moveaxis(np.asarray(x), axis, -1)
    return np.moveaxis(_fft_last(x, +1), -1, axis)


def _check2d(x):
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValidationError("fft2/ifft2 need at least 2 dimensions")
    ny, nx = x.shape[-2:]
    if not (is_power_of_two(ny) and is_power_of_two(nx)):
        raise ValidationError(f"matrix {ny}x{nx} is not power-of-two sized; zero-pad each axis to a power of two")
    return x


def fft2(x) -> np.ndarray:
    """Unitary 2D DFT over the last two axes, exp(-2 pi i k n / N) kernel."""
    x = _check2d(x)
    return fft(fft(x, -1), -2)


def ifft2(x) -> np.ndarray:
    x = _check2d(x)
    return ifft(ifft(x, -1), -2)


def dft_matrix(n: int, sign: int = -1) -> np.ndarray:
    """Dense unnormalized DFT matrix ``exp(sign 2 pi i k j / n)``."""
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
