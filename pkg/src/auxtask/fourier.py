"""Two-channel Fourier targets (magnitude, phase) of grayscaled images.

Convention: unnormalized forward transform, DC at bin (0, 0), no shift::

    F[u, v] = sum_{m, n} x[m, n] * exp(-2j*pi*(u*m/H + v*n/W))
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, DimensionError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class Spectrum:
    real: np.ndarray
    imag: np.ndarray

    @property
    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "Spectrum":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


def grayscale(image: np.ndarray) -> np.ndarray:
    """BT.601 luma of a (..., 3, H, W) RGB array."""
    image = np.asarray(image)
    if image.ndim < 3 or image.shape[-3] != 3:
        raise DimensionError(f"grayscale expects 3 channels on axis -3, got shape {image.shape}")
    r, g, b = image[..., 0, :, :], image[..., 1, :, :], image[..., 2, :, :]
    dtype = image.dtype if image.dtype.kind == "f" else np.float64
    wr, wg, wb = (np.asarray(w, dtype=dtype) for w in LUMA_WEIGHTS)
    return wr * r + wg * g + wb * b


def dft2_naive(grid: np.ndarray) -> Spectrum:
    """Direct double-sum DFT over all (m, n) for every bin; O((HW)^2)."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    m, n = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    m, n = m.ravel(), n.ravel()
    # Integer phase products reduced mod H/W keep the angles exact.
    phase = (np.outer(m, m) % h) / h + (np.outer(n, n) % w) / w
    kernel = np.exp(-2j * np.pi * phase)  # rows: bin (u, v); cols: pixel (m, n)
    return Spectrum.from_complex((kernel @ grid.ravel()).reshape(h, w))


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_last_axis(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ContractError(f"radix-2 FFT needs a power-of-two length, got {n}")
    lead = x.shape[:-1]
    y = x[..., _bit_reverse(n)].copy()
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = y.reshape(*lead, n // size, size)
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * twiddle
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        size *= 2
    return y


def fft2(grid: np.ndarray) -> Spectrum:
    """Row-column 2-D FFT of the trailing two axes (batched over leading axes).

    Arithmetic runs in complex128 regardless of the input dtype.
    """
    grid = np.asarray(grid)
    if grid.ndim < 2:
        raise DimensionError(f"fft2 expects at least 2 dims, got shape {grid.shape}")
    h, w = grid.shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ContractError(f"fft2 supports power-of-two sizes only, got {h}x{w}")
    rows = fft_last_axis(grid)
    cols = fft_last_axis(np.swapaxes(rows, -1, -2))
    return Spectrum.from_complex(np.swapaxes(cols, -1, -2))


def ft_target(image: np.ndarray, log_magnitude: bool = False) -> np.ndarray:
    """Magnitude and phase of the 2-D FFT of the grayscaled image.

    Accepts (3, H, W) or a batch (N, 3, H, W); returns (2, H, W) or (N, 2, H, W)
    in the input's float dtype. Phase lies in (-pi, pi] with atan2(0, 0) = 0.
    With ``log_magnitude`` the first channel is ``log1p(|F|)``.
    """
    image = np.asarray(image)
    spec = fft2(grayscale(image))
    mag = np.hypot(spec.real, spec.imag)
    if log_magnitude:
        mag = np.log1p(mag)
    dtype = image.dtype if image.dtype.kind == "f" else np.float64
    phase = np.arctan2(spec.imag + 0.0, spec.real).astype(dtype)
    # -pi itself (and values rounding onto it in float32) fold onto +pi
    pi = np.asarray(np.pi, dtype=dtype)
    phase = np.where(phase <= -pi, pi, phase)
    return np.stack([mag.astype(dtype), phase], axis=-3)
