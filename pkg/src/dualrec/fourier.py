"""Centered orthonormal Fourier transforms and the trainable transform layer.

The 1-d kernel along an axis of length N computes

    Y[k] = N^{-1/2} sum_j x[j] exp(sign * 2*pi*i * (j - c)(k - c) / N),  c = N // 2

with sign -1 forward (image -> k-space) and +1 inverse.  Centering is done by
index rolls around a plain uncentered DFT, which an iterative radix-2
butterfly evaluates for power-of-two N; any other length falls back to an
explicit DFT matrix product.  numpy.fft is not used anywhere in the package.

Because the centered DFT matrix is symmetric and unitary, the adjoint of the
transform in the 2-channel real representation is simply the inverse
transform, which gives the backward rules of fft2_t / ifft2_t.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DimensionError, ParameterError
from .layers import Conv2d, Module

_DOMAINS = ("image", "kspace")


# -- raw kernels ---------------------------------------------------------

def _bit_reversal(n):
    r = np.array([0], dtype=np.intp)
    while r.size < n:
        r = np.concatenate([2 * r, 2 * r + 1])
    return r


def _fft_pow2_last(x, sign):
    """Unnormalized uncentered DFT along the last axis; len must be a power of 2."""
    n = x.shape[-1]
    y = np.ascontiguousarray(x[..., _bit_reversal(n)])
    size = 2
    lead = x.shape[:-1]
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size).astype(y.dtype)
        y = y.reshape(lead + (n // size, size))
        t = y[..., half:] * tw
        y[..., half:] = y[..., :half] - t
        y[..., :half] += t
        y = y.reshape(lead + (n,))
        size *= 2
    return y


def dft_matrix(n, sign, centered=True):
    """Dense (un-normalized uncentered, or orthonormal centered) DFT matrix."""
    j = np.arange(n)
    if centered:
        c = n // 2
        return np.exp(sign * 2j * np.pi * np.outer(j - c, j - c) / n) / np.sqrt(n)
    return np.exp(sign * 2j * np.pi * np.outer(j, j) / n)


def _dft_last(x, sign):
    n = x.shape[-1]
    if n >= 2 and n & (n - 1) == 0:
        return _fft_pow2_last(x, sign)
    return np.matmul(x, dft_matrix(n, sign, centered=False).astype(x.dtype))


def _centered_last(x, sign):
    n = x.shape[-1]
    c = n // 2
    y = _dft_last(np.roll(x, -c, axis=-1), sign)
    return np.roll(y, c, axis=-1) / np.sqrt(n)


def fft2c(z, sign=-1):
    """Centered orthonormal 2-d DFT over the last two axes of a complex array."""
    z = np.asarray(z)
    if z.ndim < 2:
        raise DimensionError("fft2c needs at least 2 dims")
    if not np.iscomplexobj(z):
        z = z.astype(np.complex128)
    y = _centered_last(z, sign)
    y = _centered_last(np.swapaxes(y, -1, -2), sign)
    return np.swapaxes(y, -1, -2)


def ifft2c(z):
    return fft2c(z, sign=+1)


# -- complex grid --------------------------------------------------------

@dataclass
class ComplexGrid:
    """A complex-valued H x W grid tagged with its domain ('image' or 'kspace')."""

    re: np.ndarray
    im: np.ndarray
    domain: str = "image"

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.shape != self.im.shape:
            raise DimensionError(f"re/im shapes differ: {self.re.shape} vs {self.im.shape}")
        if self.re.ndim != 2:
            raise DimensionError("ComplexGrid holds a 2-d grid")
        if self.domain not in _DOMAINS:
            raise ParameterError(f"domain must be one of {_DOMAINS}, got {self.domain!r}")

    @classmethod
    def from_complex(cls, z, domain):
        z = np.asarray(z)
        return cls(z.real.copy(), z.imag.copy(), domain)

    @classmethod
    def from_real(cls, x, domain="image"):
        x = np.asarray(x, dtype=np.float64)
        return cls(x.copy(), np.zeros_like(x), domain)

    @property
    def z(self):
        return self.re + 1j * self.im

    @property
    def shape(self):
        return self.re.shape

    def magnitude(self):
        return np.hypot(self.re, self.im)


def fft2(g):
    """image-domain grid -> k-space grid."""
    if g.domain != "image":
        raise ParameterError(f"fft2 expects an image-domain grid, got {g.domain!r}")
    return ComplexGrid.from_complex(fft2c(g.z), "kspace")


def ifft2(g):
    """k-space grid -> image-domain grid."""
    if g.domain != "kspace":
        raise ParameterError(f"ifft2 expects a k-space grid, got {g.domain!r}")
    return ComplexGrid.from_complex(ifft2c(g.z), "image")


# -- channel packing -----------------------------------------------------

def complex_to_channels(g):
    """ComplexGrid -> Tensor[2,H,W] with channel 0 = real, channel 1 = imaginary."""
    return Tensor(np.stack([g.re, g.im], axis=0))


def channels_to_complex_array(t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim < 3 or arr.shape[-3] != 2:
        raise DimensionError(f"expected [...,2,H,W], got {arr.shape}")
    re = np.take(arr, 0, axis=-3)
    im = np.take(arr, 1, axis=-3)
    return re + 1j * im


def complex_to_channels_array(z):
    return np.stack([z.real, z.imag], axis=-3)


def channels_to_grid(t, domain):
    z = channels_to_complex_array(t)
    if z.ndim != 2:
        raise DimensionError("channels_to_grid expects a single [2,H,W] tensor")
    return ComplexGrid.from_complex(z, domain)


# -- differentiable transforms ------------------------------------------

def _transform_t(x, sign):
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise DimensionError(f"fft ops expect [...,2,H,W], got {x.shape}")
    z = channels_to_complex_array(x.data)
    out = complex_to_channels_array(fft2c(z, sign))
    if out.real.dtype != x.dtype:
        out = out.astype(x.dtype)

    def backward(g, flow):
        gz = channels_to_complex_array(g)
        back = complex_to_channels_array(fft2c(gz, -sign)).astype(g.dtype)
        ad._flow_add(flow, x, back)

    return ad._make(out, (x,), backward)


def fft2_t(x):
    """Differentiable centered orthonormal FFT on a [...,2,H,W] channel tensor.

    The transform is unitary and symmetric, so the backward pass applies the
    inverse transform to the incoming gradient channels.
    """
    return _transform_t(x, -1)


def ifft2_t(x):
    return _transform_t(x, +1)


# -- trainable decomposed transform layer -------------------------------

def _axis_matrices(n, dtype):
    """Free real matrices initialized to the centered orthonormal inverse DFT."""
    w = dft_matrix(n, +1, centered=True)
    return (w.real.astype(dtype), (-w.imag).astype(dtype),
            w.imag.astype(dtype), w.real.astype(dtype))


class DTLayer(Module):
    """k-space to image mapping: two learnable axis transforms with an
    interleaved transpose, then a small refinement head with a skip.

    The axis stage stores four real matrices per axis (real/imag mixing is
    unconstrained) initialized so that it reproduces the centered orthonormal
    inverse 2-d DFT exactly.  The refinement head is conv(2->hidden)+relu then
    a zero-initialized conv(hidden->out) added to the skip, so the whole layer
    equals the inverse FFT at init.  Optional guidance features enter through
    a separate zero-initialized bias-free convolution ahead of the skip.
    """

    def __init__(self, size, out_channels=2, hidden=16, golf_channels=0,
                 rng=None, dtype=np.float64):
        super().__init__()
        if isinstance(size, int):
            size = (size, size)
        self.size = tuple(size)
        self.out_channels = out_channels
        h, w = self.size
        rr, ri, ir, ii = _axis_matrices(h, dtype)
        self.m1_rr, self.m1_ri = Parameter(rr), Parameter(ri)
        self.m1_ir, self.m1_ii = Parameter(ir), Parameter(ii)
        rr, ri, ir, ii = _axis_matrices(w, dtype)
        self.m2_rr, self.m2_ri = Parameter(rr), Parameter(ri)
        self.m2_ir, self.m2_ii = Parameter(ir), Parameter(ii)
        if rng is None:
            rng = np.random.default_rng(0)
        self.refine1 = Conv2d(2, hidden, 3, padding=1, rng=rng, dtype=dtype)
        self.refine2 = Conv2d(hidden, out_channels, 3, padding=1, zero_init=True, dtype=dtype)
        self.inject = None
        if golf_channels:
            self.inject = Conv2d(golf_channels, out_channels, 3, padding=1,
                                 zero_init=True, bias=False, dtype=dtype)

    def axis_transform(self, x):
        """[B,2,H,W] k-space channels -> [B,2,H,W] image channels."""
        if x.ndim != 4 or x.shape[1] != 2:
            raise DimensionError(f"axis_transform expects [B,2,H,W], got {x.shape}")
        if x.shape[2:] != self.size:
            raise DimensionError(f"grid {x.shape[2:]} != layer size {self.size}")
        kr, ki = x[:, 0], x[:, 1]
        r1 = ad.add(ad.matmul(self.m1_rr, kr), ad.matmul(self.m1_ri, ki))
        i1 = ad.add(ad.matmul(self.m1_ir, kr), ad.matmul(self.m1_ii, ki))
        r1t, i1t = ad.transpose(r1, (0, 2, 1)), ad.transpose(i1, (0, 2, 1))
        r2 = ad.add(ad.matmul(self.m2_rr, r1t), ad.matmul(self.m2_ri, i1t))
        i2 = ad.add(ad.matmul(self.m2_ir, r1t), ad.matmul(self.m2_ii, i1t))
        r2t, i2t = ad.transpose(r2, (0, 2, 1)), ad.transpose(i2, (0, 2, 1))
        b, h, w = r2t.shape
        return ad.concat([r2t.reshape(b, 1, h, w), i2t.reshape(b, 1, h, w)], axis=1)

    def forward(self, k, golf=None):
        d = self.axis_transform(k)
        out = self.refine2(ad.relu(self.refine1(d)))
        if golf is not None:
            if self.inject is None:
                raise ParameterError("layer was built without guidance channels")
            out = ad.add(out, self.inject(golf))
        skip = d if self.out_channels == 2 else d[:, 0:1]
        return ad.add(out, skip)


def dt_forward(q, layer, golf=None):
    """Apply a DTLayer to k-space channels; accepts [2,H,W] or [B,2,H,W]."""
    if not isinstance(q, Tensor):
        q = Tensor(q)
    squeeze = q.ndim == 3
    if squeeze:
        q = q.reshape((1,) + q.shape)
    out = layer(q, golf=golf)
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out
