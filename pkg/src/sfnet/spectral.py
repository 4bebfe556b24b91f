"""Fourier and cosine transforms on tensors, with gradients.

Transforms are radix-2 (power-of-two extents) and run in complex128
internally; results are stored back at the input tensor's precision. A
complex field is carried as a :class:`ComplexSpectrum` holding separate real
and imaginary tensors, so every step of a spectral pipeline stays on the
autodiff graph.

Transform conventions: the forward DFT is unnormalised, the inverse carries
the ``1/N`` factor.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from sfnet import kernels
from sfnet.autodiff.tensor import ShapeError, Tensor, record, select

logger = logging.getLogger(__name__)

SPATIAL = "spatial"
CHANNEL = "channel"

# imaginary residue (relative to the largest real magnitude) tolerated by
# a strict inverse transform
RESIDUE_LIMIT = 1e-3


class SpectrumError(ValueError):
    """A spectrum that cannot be inverted to a real signal."""


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def next_power_of_two(n: int) -> int:
    return 1 << (n - 1).bit_length()


@dataclass(frozen=True)
class HighPassSpec:
    """Centered rectangular stop band.

    Along an axis of extent ``L`` the zeroed index range (in centered layout)
    is ``[L//2 - floor(L/scale), L//2 + floor(L/scale))``. For a channel
    spectrum only ``width`` is used and names the padded channel extent.
    """

    width: int
    height: int
    scale: float = 4.0

    def __post_init__(self):
        if self.scale < 2:
            raise ValueError(f"scale must be >= 2, got {self.scale}")
        if self.width < 1 or self.height < 1:
            raise ValueError("spectrum extents must be positive")

    @property
    def phi(self) -> float:
        """Nominal fraction of coefficients removed, ``4 / scale**2``."""
        return 4.0 / self.scale ** 2

    def band(self, extent: int) -> tuple:
        r = int(math.floor(extent / self.scale))
        return extent // 2 - r, extent // 2 + r

    def mask(self) -> np.ndarray:
        """Boolean ``height × width`` array, True where coefficients are zeroed."""
        rlo, rhi = self.band(self.height)
        clo, chi = self.band(self.width)
        m = np.zeros((self.height, self.width), dtype=bool)
        m[rlo:rhi, clo:chi] = True
        return m

    def zero_fraction(self) -> float:
        return float(self.mask().mean())


@dataclass
class ComplexSpectrum:
    real: Tensor
    imag: Tensor
    centered: bool = False
    axes: str = SPATIAL
    # channel count before zero padding (channel transforms only)
    channels: Optional[int] = None

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real {self.real.shape} and imag {self.imag.shape} differ")
        if self.axes not in (SPATIAL, CHANNEL):
            raise ValueError(f"unknown transform axes {self.axes!r}")

    @property
    def shape(self) -> tuple:
        return self.real.shape

    def to_numpy(self) -> np.ndarray:
        return self.real.data.astype(np.complex128) + 1j * self.imag.data


def _array_axes(ndim: int, axes: str) -> tuple:
    if axes == SPATIAL:
        return (ndim - 2, ndim - 1)
    if ndim < 2:
        raise ShapeError("channel transform needs at least 2 dimensions")
    return (1,) if ndim >= 3 else (0,)


def transform(z: np.ndarray, axes: tuple, inverse: bool = False) -> np.ndarray:
    """Unnormalised radix-2 DFT of a complex array over each axis in ``axes``."""
    out = np.asarray(z, dtype=np.complex128)
    for ax in axes:
        n = out.shape[ax]
        if not is_power_of_two(n):
            raise ShapeError(f"radix-2 transform needs a power-of-two extent, got {n}")
        out = kernels.fft_axis(out, ax, inverse)
    return out


def _pad_channels(a: np.ndarray, target: int) -> np.ndarray:
    extra = target - a.shape[1]
    if extra == 0:
        return a
    widths = [(0, 0)] * a.ndim
    widths[1] = (0, extra)
    return np.pad(a, widths)


def fft2(x: Tensor, axes: str = SPATIAL) -> ComplexSpectrum:
    """Forward DFT of a real tensor over its last two axes or its channel axis.

    Channel transforms zero-pad the channel axis to the next power of two.
    """
    dt = x.dtype
    if axes == CHANNEL:
        c = x.shape[1]
        cp = next_power_of_two(c)
        xd = _pad_channels(x.data, cp)
    else:
        c = None
        xd = x.data
    arr_axes = _array_axes(x.ndim, axes)
    z = transform(xd, arr_axes)

    # one node for both parts so backward runs a single inverse transform
    packed = record("fft", np.stack([z.real, z.imag]).astype(dt), (x,),
                    lambda g: (adjoint(g[0] + 1j * g[1]),))

    def adjoint(gz):
        back = transform(gz, arr_axes, inverse=True).real
        if axes == CHANNEL:
            back = back[:, :c]
        return np.ascontiguousarray(back, dtype=dt)

    return ComplexSpectrum(select(packed, 0), select(packed, 1), centered=False, axes=axes, channels=c)


def ifft2(s: ComplexSpectrum, strict: bool = True, diagnostics: Optional[dict] = None) -> Tensor:
    """Normalised inverse DFT, returning the real part.

    The imaginary residue ``max|Im|`` is written to ``diagnostics['imag_residue']``
    when a dict is given. With ``strict`` a residue above ``RESIDUE_LIMIT``
    (relative to ``max(1, max|Re|)``) raises :class:`SpectrumError`; without
    it the real part is taken unconditionally, which equals inverting the
    Hermitian-symmetrised spectrum.
    """
    if s.centered:
        raise SpectrumError("spectrum is centered; apply ifftshift before inverting")
    re_t, im_t = s.real, s.imag
    dt = re_t.dtype
    arr_axes = _array_axes(re_t.ndim, s.axes)
    n = int(np.prod([re_t.shape[a] for a in arr_axes]))
    z = transform(s.to_numpy(), arr_axes, inverse=True) / n
    if s.axes == CHANNEL and s.channels is not None:
        z = z[:, :s.channels]
    residue = float(np.abs(z.imag).max()) if z.size else 0.0
    if diagnostics is not None:
        diagnostics["imag_residue"] = residue
    if strict and residue > RESIDUE_LIMIT * max(1.0, float(np.abs(z.real).max())):
        raise SpectrumError(f"inverse transform left imaginary residue {residue:.3g}")
    logger.debug("ifft2 imaginary residue %.3g", residue)
    out = np.ascontiguousarray(z.real, dtype=dt)

    def backward(g):
        if s.axes == CHANNEL and s.channels is not None:
            g = _pad_channels(g, re_t.shape[1])
        gz = transform(g, arr_axes) / n
        return (np.ascontiguousarray(gz.real, dtype=dt), np.ascontiguousarray(gz.imag, dtype=dt))

    return record("ifft", out, (re_t, im_t), backward)


def _roll(t: Tensor, shifts: tuple, axes: tuple) -> Tensor:
    back = tuple(-s for s in shifts)
    return record("roll", np.roll(t.data, shifts, axes), (t,), lambda g: (np.roll(g, back, axes),))


def _shift(s: ComplexSpectrum, inverse: bool) -> ComplexSpectrum:
    arr_axes = _array_axes(s.real.ndim, s.axes)
    shifts = tuple(s.shape[a] // 2 for a in arr_axes)
    if inverse:
        shifts = tuple(-v for v in shifts)
    return ComplexSpectrum(
        _roll(s.real, shifts, arr_axes),
        _roll(s.imag, shifts, arr_axes),
        centered=not inverse,
        axes=s.axes,
        channels=s.channels,
    )


def fftshift(s: ComplexSpectrum) -> ComplexSpectrum:
    """Move the zero-frequency coefficient to the center of the transform axes."""
    if s.centered:
        raise SpectrumError("spectrum is already centered")
    return _shift(s, inverse=False)


def ifftshift(s: ComplexSpectrum) -> ComplexSpectrum:
    if not s.centered:
        raise SpectrumError("spectrum is not centered")
    return _shift(s, inverse=True)


def _zero_where(t: Tensor, mask: np.ndarray) -> Tensor:
    zero = t.dtype.type(0)
    return record("mask", np.where(mask, zero, t.data), (t,),
                  lambda g: (np.where(mask, zero, g),))


def stop_band(shape: tuple, axes: str, spec: HighPassSpec) -> np.ndarray:
    """Broadcastable boolean mask of the zeroed coefficients for a spectrum shape."""
    arr_axes = _array_axes(len(shape), axes)
    if axes == SPATIAL:
        h, w = shape[arr_axes[0]], shape[arr_axes[1]]
        if (h, w) != (spec.height, spec.width):
            raise ShapeError(f"spec extents {(spec.height, spec.width)} != spectrum {(h, w)}")
        return spec.mask()
    ext = shape[arr_axes[0]]
    if ext != spec.width:
        raise ShapeError(f"spec width {spec.width} != channel extent {ext}")
    lo, hi = spec.band(ext)
    m = np.zeros(ext, dtype=bool)
    m[lo:hi] = True
    view = [1] * len(shape)
    view[arr_axes[0]] = ext
    return m.reshape(view)


def high_pass(s: ComplexSpectrum, spec: HighPassSpec) -> ComplexSpectrum:
    """Zero the centered stop band; every other coefficient is left untouched."""
    if not s.centered:
        raise SpectrumError("high_pass needs a centered spectrum")
    mask = stop_band(s.shape, s.axes, spec)
    return ComplexSpectrum(
        _zero_where(s.real, mask),
        _zero_where(s.imag, mask),
        centered=True,
        axes=s.axes,
        channels=s.channels,
    )


def high_frequency(x: Tensor, spec: HighPassSpec, axes: str = SPATIAL,
                   diagnostics: Optional[dict] = None) -> Tensor:
    """``iFFT(B(FFT(x)))``: keep the part of ``x`` outside the stop band.

    The stop band is not conjugate-symmetric (its lower edge has no mirrored
    upper edge), so the real part of the inverse is taken.
    """
    spectrum = ifftshift(high_pass(fftshift(fft2(x, axes)), spec))
    return ifft2(spectrum, strict=False, diagnostics=diagnostics)


def hfri(x: Tensor, spec: HighPassSpec, diagnostics: Optional[dict] = None) -> Tensor:
    """High-frequency representation of an image batch, per channel."""
    if x.ndim != 4:
        raise ShapeError("hfri expects an N×C×H×W batch")
    return high_frequency(x, spec, SPATIAL, diagnostics)


# -- amplitude / phase -------------------------------------------------------

_AMP_GUARD = 1e-8


def amp_phase(s: ComplexSpectrum) -> tuple:
    """Split into amplitude ``|z|`` and phase ``atan2(im, re)`` in (-pi, pi]."""
    re, im = s.real, s.imag
    a = np.hypot(re.data, im.data)
    # +0.0 folds -0.0 so real negative coefficients get phase +pi
    p = np.arctan2(im.data + 0.0, re.data)
    live = a >= _AMP_GUARD
    safe = np.where(live, a, 1)
    inv_a = np.where(live, 1 / safe, 0).astype(re.dtype)
    inv_a2 = np.where(live, 1 / (safe * safe), 0).astype(re.dtype)
    red, imd = re.data, im.data

    amp = record("amplitude", a, (re, im),
                 lambda g: (g * red * inv_a, g * imd * inv_a))
    phase = record("phase", p.astype(re.dtype), (re, im),
                   lambda g: (-g * imd * inv_a2, g * red * inv_a2))
    return amp, phase


def recombine(amplitude: Tensor, phase: Tensor, axes: str = SPATIAL,
              centered: bool = False, channels: Optional[int] = None) -> ComplexSpectrum:
    """``amplitude * exp(i * phase)`` as a spectrum."""
    if amplitude.shape != phase.shape:
        raise ShapeError("amplitude and phase shapes differ")
    a, p = amplitude.data, phase.data
    c, s = np.cos(p), np.sin(p)
    re = record("polar_re", a * c, (amplitude, phase), lambda g: (g * c, -g * a * s))
    im = record("polar_im", a * s, (amplitude, phase), lambda g: (g * s, g * a * c))
    return ComplexSpectrum(re, im, centered=centered, axes=axes, channels=channels)


# -- DCT ---------------------------------------------------------------------

def dct_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """Orthonormal type-II DCT matrix ``D`` with ``y = D @ x``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    d[0] /= math.sqrt(2.0)
    return d.astype(dtype)


def dct2(x: Tensor) -> Tensor:
    """Orthonormal 2-D type-II DCT of a ``H×W`` tensor."""
    if x.ndim != 2:
        raise ShapeError("dct2 expects a 2-D tensor")
    h, w = x.shape
    dh, dw = dct_matrix(h), dct_matrix(w)
    out = (dh @ x.data.astype(np.float64) @ dw.T).astype(x.dtype)
    return record("dct2", out, (x,),
                  lambda g: ((dh.T @ g.astype(np.float64) @ dw).astype(x.dtype),))
