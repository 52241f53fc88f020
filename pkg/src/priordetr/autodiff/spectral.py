"""2-D FFT ops on real feature maps.

Spectra are real tensors with a trailing axis of size 2 holding (real, imag),
so the rest of the engine never has to handle complex dtypes.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, make_result

# largest tolerated |imag| / max(1, |real|) after an inverse transform
IMAG_RESIDUE_TOL = 1e-8


def residue_tol(dtype) -> float:
    """Residue tolerance for spectra stored at ``dtype``.

    float32 spectra lose Hermitian symmetry at the 1e-7 level from storage
    rounding alone, so the bound widens to a small multiple of that eps.
    """
    return max(IMAG_RESIDUE_TOL, 64 * float(np.finfo(dtype).eps))


def _pack(z: np.ndarray, dtype) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1).astype(dtype, copy=False)


def _unpack(s: np.ndarray) -> np.ndarray:
    return s[..., 0] + 1j * s[..., 1]


def fft2(x: Tensor) -> Tensor:
    """Forward DFT over the last two axes of a real tensor -> (..., H, W, 2)."""
    h, w = x.shape[-2:]
    out = _pack(np.fft.fft2(x.data.astype(np.float64), axes=(-2, -1)), x.dtype)

    def backward(g):
        z = np.fft.ifft2(_unpack(g.astype(np.float64)), axes=(-2, -1))
        return ((z.real * (h * w)).astype(g.dtype),)

    return make_result(out, (x,), backward, "fft2")


def ifft2(spec: Tensor, check_imag: bool = True) -> Tensor:
    """Inverse DFT of a packed spectrum, keeping the real part.

    The imaginary residue of the result must be negligible (Hermitian input);
    with ``check_imag`` a violation raises ``FloatingPointError``.
    """
    h, w = spec.shape[-3:-1]
    z = np.fft.ifft2(_unpack(spec.data.astype(np.float64)), axes=(-2, -1))
    if check_imag and z.size:
        scale = max(1.0, float(np.abs(z.real).max()))
        residue = float(np.abs(z.imag).max())
        if residue > residue_tol(spec.dtype) * scale:
            raise FloatingPointError(
                f"inverse FFT imaginary residue {residue:.3e} exceeds tolerance"
            )
    out = np.ascontiguousarray(z.real).astype(spec.dtype, copy=False)

    def backward(g):
        return (_pack(np.fft.fft2(g.astype(np.float64), axes=(-2, -1)) / (h * w), g.dtype),)

    return make_result(out, (spec,), backward, "ifft2")


def imag_residue(spec: np.ndarray) -> float:
    """Max |imag| of the inverse transform of a packed spectrum."""
    z = np.fft.ifft2(_unpack(np.asarray(spec, dtype=np.float64)), axes=(-2, -1))
    return float(np.abs(z.imag).max()) if z.size else 0.0


def complex_abs(spec: Tensor) -> Tensor:
    """Amplitude |X| of a packed spectrum -> (..., H, W)."""
    re = spec.data[..., 0]
    im = spec.data[..., 1]
    amp = np.hypot(re, im)
    safe = np.where(amp > 0, amp, 1.0)

    def backward(g):
        scale = np.where(amp > 0, g / safe, 0.0)
        return (np.stack([scale * re, scale * im], axis=-1),)

    return make_result(amp, (spec,), backward, "complex_abs")


def phase_unit(spec: Tensor) -> Tensor:
    """Unit phasor X / |X| (1 + 0i where |X| = 0), packed like the input."""
    re = spec.data[..., 0]
    im = spec.data[..., 1]
    amp = np.hypot(re, im)
    nz = amp > 0
    safe = np.where(nz, amp, 1.0)
    out = np.stack([np.where(nz, re / safe, 1.0), np.where(nz, im / safe, 0.0)], axis=-1)

    def backward(g):
        g0 = g[..., 0]
        g1 = g[..., 1]
        cube = safe ** 3
        cross = g0 * im - g1 * re
        ga = np.where(nz, im * cross / cube, 0.0)
        gb = np.where(nz, -re * cross / cube, 0.0)
        return (np.stack([ga, gb], axis=-1),)

    return make_result(out.astype(spec.dtype, copy=False), (spec,), backward, "phase_unit")
