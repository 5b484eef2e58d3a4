"""Single-level 2D Haar transform and the wavelet attention block.

All transforms act on the last two axes, so batches of images (or of
feature maps) go through in one call.  The orthonormal 2D Haar pair gives
every sub-band coefficient as one half of a signed sum over a 2x2 block;
working with the exact factor 0.5 keeps the round trip bit-exact on
dyadic inputs such as the quantised depth images.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError

WA_VARIANTS = ("standard", "hh_replaced", "lh_removed", "hl_removed")
BANDS = ("ll", "lh", "hl", "hh")


@dataclass(frozen=True)
class HaarFilterBank:
    low: tuple = (1 / math.sqrt(2), 1 / math.sqrt(2))
    high: tuple = (1 / math.sqrt(2), -1 / math.sqrt(2))

    def matrices(self, n):
        """The (n/2, n) low- and high-pass analysis matrices.

        Row k carries the two filter taps at columns 2k and 2k + 1.
        """
        if n < 2 or n % 2:
            raise InvalidInputError(f"filter matrices need an even size >= 2, got {n}")
        low = np.zeros((n // 2, n))
        high = np.zeros((n // 2, n))
        for k in range(n // 2):
            low[k, 2 * k:2 * k + 2] = self.low
            high[k, 2 * k:2 * k + 2] = self.high
        return low, high


HAAR = HaarFilterBank()


class SubBands(NamedTuple):
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray

    def stack(self):
        """Bands stacked on a new axis -3, in (ll, lh, hl, hh) order."""
        return np.stack(self, axis=-3)

    @classmethod
    def unstack(cls, arr):
        return cls(*(arr[..., i, :, :] for i in range(4)))


def _check_even(shape, what):
    if len(shape) < 2:
        raise InvalidInputError(f"{what}: need at least a 2-d array, got shape {shape}")
    h, w = shape[-2:]
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise InvalidInputError(f"{what}: spatial size must be even and >= 2, got {h}x{w}")


@numba.njit(cache=True)
def _analysis_kernel(x, out):
    for b in range(x.shape[0]):
        for i in range(x.shape[1] // 2):
            for j in range(x.shape[2] // 2):
                p, q = x[b, 2 * i, 2 * j], x[b, 2 * i, 2 * j + 1]
                r, t = x[b, 2 * i + 1, 2 * j], x[b, 2 * i + 1, 2 * j + 1]
                s0, s1, d0, d1 = p + q, r + t, p - q, r - t
                out[b, 0, i, j] = (s0 + s1) * 0.5
                out[b, 1, i, j] = (s0 - s1) * 0.5
                out[b, 2, i, j] = (d0 + d1) * 0.5
                out[b, 3, i, j] = (d0 - d1) * 0.5


@numba.njit(cache=True)
def _synthesis_kernel(c, out):
    for b in range(c.shape[0]):
        for i in range(c.shape[2]):
            for j in range(c.shape[3]):
                s1, s2 = c[b, 0, i, j] + c[b, 1, i, j], c[b, 0, i, j] - c[b, 1, i, j]
                d1, d2 = c[b, 2, i, j] + c[b, 3, i, j], c[b, 2, i, j] - c[b, 3, i, j]
                out[b, 2 * i, 2 * j] = (s1 + d1) * 0.5
                out[b, 2 * i, 2 * j + 1] = (s1 - d1) * 0.5
                out[b, 2 * i + 1, 2 * j] = (s2 + d2) * 0.5
                out[b, 2 * i + 1, 2 * j + 1] = (s2 - d2) * 0.5


def _analysis(x):
    """(..., H, W) -> (..., 4, H/2, W/2) in (ll, lh, hl, hh) order."""
    *lead, h, w = x.shape
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, h, w)
    out = np.empty((flat.shape[0], 4, h // 2, w // 2))
    _analysis_kernel(flat, out)
    return out.reshape(*lead, 4, h // 2, w // 2)


def _synthesis(coeffs):
    *lead, _, n, m = coeffs.shape
    flat = np.ascontiguousarray(coeffs, dtype=np.float64).reshape(-1, 4, n, m)
    out = np.empty((flat.shape[0], 2 * n, 2 * m))
    _synthesis_kernel(flat, out)
    return out.reshape(*lead, 2 * n, 2 * m)


def dwt2(image):
    """Decompose into (ll, lh, hl, hh), each half the input size.

    Equal to ``L I L^T, H I L^T, L I H^T, H I H^T`` with the Haar analysis
    matrices, applied over the trailing two axes.
    """
    image = np.asarray(image, dtype=np.float64)
    _check_even(image.shape, "dwt2")
    return SubBands.unstack(_analysis(image))


def idwt2(sb):
    """Inverse of :func:`dwt2`."""
    bands = [np.asarray(b, dtype=np.float64) for b in sb]
    if len(bands) != 4 or any(b.shape != bands[0].shape for b in bands):
        raise InvalidInputError(f"idwt2: sub-band shapes differ: {[b.shape for b in bands]}")
    if bands[0].ndim < 2:
        raise InvalidInputError("idwt2: sub-bands must be at least 2-d")
    return _synthesis(np.stack(bands, axis=-3))


def dwt2_stacked(x):
    """Differentiable DWT of a Tensor: (..., N, N) -> (..., 4, N/2, N/2).

    The transform is orthonormal, so its adjoint (the backward pass) is the
    inverse transform.
    """
    x = ad.as_tensor(x)
    _check_even(x.shape, "dwt2")
    return ad.apply_op(_analysis(x.data), (x,), lambda g: (_synthesis(g),), "dwt2")


def idwt2_stacked(coeffs):
    """Differentiable inverse DWT of a Tensor: (..., 4, n, n) -> (..., 2n, 2n)."""
    coeffs = ad.as_tensor(coeffs)
    if coeffs.ndim < 3 or coeffs.shape[-3] != 4:
        raise InvalidInputError(f"idwt2: expected a (..., 4, n, n) band stack, got {coeffs.shape}")
    return ad.apply_op(_synthesis(coeffs.data), (coeffs,), lambda g: (_analysis(g),), "idwt2")


def _spatial_softmax(x):
    shape = x.shape
    flat = ad.reshape(x, shape[:-2] + (shape[-2] * shape[-1],))
    return ad.reshape(ad.softmax(flat, axis=-1), shape)


def _attention(lh, hl, variant):
    if variant == "lh_removed":
        return _spatial_softmax(hl)
    if variant == "hl_removed":
        return _spatial_softmax(lh)
    return _spatial_softmax(ad.add(lh, hl))


def attention_map(features, variant="standard"):
    """Spatial softmax attention computed from the detail bands."""
    _, _, lh, hl, _ = _wa_parts(features, variant)
    return _attention(lh, hl, variant)


def _wa_parts(features, variant):
    if variant not in WA_VARIANTS:
        raise InvalidInputError(f"unknown wavelet attention variant {variant!r}")
    features = ad.as_tensor(features)
    if not np.all(np.isfinite(features.data)):
        raise InvalidInputError("wa_block: non-finite input")
    bands = dwt2_stacked(features)
    parts = [ad.slice_(bands, (Ellipsis, i, slice(None), slice(None))) for i in range(4)]
    return (features, *parts)


def wa_block_reference(features, variant="standard"):
    """Wavelet attention composed from generic autodiff primitives.

    Slower than :func:`wa_block` but shares none of its backward code; the
    two are checked against each other.
    """
    _, ll, lh, hl, hh = _wa_parts(features, variant)
    att = _attention(lh, hl, variant)
    base = hh if variant == "hh_replaced" else ll
    return ad.add(base, ad.hadamard(base, att))


_DETAIL_BANDS = {"standard": (1, 2), "hh_replaced": (1, 2), "lh_removed": (2,), "hl_removed": (1,)}


def wa_block(features, variant="standard"):
    """Wavelet attention: ``Z = B + B * softmax(detail)``, B = ll (or hh).

    ``features`` is a Tensor (or array) of shape (..., C, N, N); every
    channel is transformed on its own and the softmax runs over the
    (N/2)^2 spatial positions of that channel.  The diagonal band is
    dropped except in the ``hh_replaced`` ablation, where it stands in for
    ll.  Runs as a single recorded op with an analytic backward.
    """
    if variant not in WA_VARIANTS:
        raise InvalidInputError(f"unknown wavelet attention variant {variant!r}")
    x = ad.as_tensor(features)
    if not np.all(np.isfinite(x.data)):
        raise InvalidInputError("wa_block: non-finite input")
    _check_even(x.shape, "wa_block")
    bands = _analysis(x.data)
    detail = _DETAIL_BANDS[variant]
    base_idx = 3 if variant == "hh_replaced" else 0
    logits = bands[..., detail[0], :, :]
    if len(detail) == 2:
        logits = logits + bands[..., detail[1], :, :]
    *lead, n, m = logits.shape
    flat = logits.reshape(*lead, n * m)
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    att = (e / e.sum(axis=-1, keepdims=True)).reshape(logits.shape)
    base = bands[..., base_idx, :, :]
    out = base + base * att

    def backward(g):
        g_att = g * base
        t = (g_att * att).reshape(*lead, n * m).sum(axis=-1)[..., None, None]
        g_logits = att * (g_att - t)
        gb = np.zeros(bands.shape)
        gb[..., base_idx, :, :] = g + g * att
        for k in detail:
            gb[..., k, :, :] += g_logits
        return (_synthesis(gb),)

    return ad.apply_op(out, (x,), backward, "wa_block")


def band_to_gray(band):
    """Min-max normalise a band to 0..255 uint8 (all zeros when flat)."""
    band = np.asarray(band, dtype=np.float64)
    lo, hi = float(band.min()), float(band.max())
    if hi - lo <= 0:
        return np.zeros(band.shape, dtype=np.uint8)
    return np.round((band - lo) / (hi - lo) * 255.0).astype(np.uint8)
