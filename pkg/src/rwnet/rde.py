"""Rate-distortion coefficient masks in the Haar wavelet domain.

A mask ``s`` in [0, 1] weights every wavelet coefficient of the six
views.  Obfuscation keeps ``h * s`` and fills the rest with Gaussian noise
``v * (1 - s)`` drawn from per-band statistics of the sample; the mask is
fitted by projected gradient descent on

    mean_r ||Q(x) - Q(clip(idwt(h * s + v_r * (1 - s))))||^2 + lam * sum(s)

against a frozen target network Q.
"""

import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError, NumericError
from .model import embed, forward, require_frozen
from .wavelet import _analysis, _synthesis, idwt2_stacked

SIGMA_MIN = 1e-6


@dataclass
class RDEConfig:
    lam: float = 0.01
    lr: float = 0.1
    steps: int = 30
    draws: int = 4

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError("lam must be non-negative")
        if self.lr <= 0:
            raise InvalidInputError("mask learning rate must be positive")
        if self.steps < 1 or self.draws < 1:
            raise InvalidInputError("steps and draws must be at least 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class CoefficientMask:
    values: np.ndarray  # (6, 4, N/2, N/2), bands in (ll, lh, hl, hh) order
    sample_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4 or self.values.shape[1] != 4:
            raise InvalidInputError(f"mask must have shape (views, 4, n, n), got {self.values.shape}")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise InvalidInputError("mask entries must lie in [0, 1]")

    @classmethod
    def ones(cls, views, sample_id=""):
        v, n = views.shape[0], views.shape[-1] // 2
        return cls(np.ones((v, 4, n, n)), sample_id)

    @property
    def density(self):
        """||s||_1 / n."""
        return float(self.values.mean())


class MaskStore:
    """sample_id -> CoefficientMask; later puts overwrite earlier ones."""

    def __init__(self):
        self._masks = OrderedDict()

    def get(self, sample_id):
        return self._masks.get(sample_id)

    def put(self, sample_id, mask):
        self._masks[sample_id] = mask

    def __contains__(self, sample_id):
        return sample_id in self._masks

    def __len__(self):
        return len(self._masks)

    def ids(self):
        return list(self._masks)

    def save(self, prefix):
        arrays = OrderedDict((k, m.values) for k, m in sorted(self._masks.items()))
        return ad.save_parameters(prefix, arrays, {"kind": "mask-store"})

    @classmethod
    def load(cls, prefix):
        arrays, _ = ad.load_parameters(prefix)
        store = cls()
        for k, v in arrays.items():
            store.put(k, CoefficientMask(v, k))
        return store


@dataclass
class ObfuscationNoise:
    mean: np.ndarray  # (6, 4)
    std: np.ndarray   # (6, 4)

    def draw(self, rng, n):
        """One (6, 4, n, n) block of noise coefficients."""
        return _draw(self.mean, self.std, rng, self.mean.shape + (n, n))


def _band_stats(coeffs, sigma_min=SIGMA_MIN):
    flat = coeffs.reshape(coeffs.shape[:-2] + (-1,))
    return flat.mean(axis=-1), np.maximum(flat.std(axis=-1), sigma_min)


def estimate_noise(vs, sigma_min=SIGMA_MIN):
    """Per view and per band Gaussian moments of the sample's coefficients."""
    views = getattr(vs, "views", vs)
    mean, std = _band_stats(_analysis(np.asarray(views, dtype=np.float64)), sigma_min)
    return ObfuscationNoise(mean, std)


def _draw(noise_mean, noise_std, rng, shape):
    z = rng.standard_normal(shape)
    return noise_mean[..., None, None] + noise_std[..., None, None] * z


def noise_seed(seed, sample_id, epoch, step):
    """Seed material for one sample's noise at a given epoch and step."""
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(str(sample_id).encode()), int(epoch), int(step)]


def _coeff_shape(views):
    v, n = views.shape[-3], views.shape[-1] // 2
    return (v, 4, n, n)


def _check_mask(views, mask):
    values = mask.values if isinstance(mask, CoefficientMask) else np.asarray(mask, dtype=np.float64)
    if values.shape != _coeff_shape(views):
        raise InvalidInputError(f"mask shape {values.shape} does not match views {views.shape}")
    return values


def obfuscate(vs, mask, noise, seed):
    """``clip(idwt(h * s + v * (1 - s)), 0, 1)`` with one seeded noise draw."""
    s = _check_mask(vs.views, mask)
    if noise.mean.shape != s.shape[:2] or noise.std.shape != s.shape[:2]:
        raise InvalidInputError("noise parameters do not match the mask layout")
    h = _analysis(vs.views)
    v = noise.draw(np.random.default_rng(seed), s.shape[-1])
    y = np.clip(_synthesis(h * s + v * (1.0 - s)), 0.0, 1.0)
    return vs.replace_views(y)


def apply_mask(vs, mask):
    """``clip(idwt(dwt(x) * s), 0, 1)`` for every view; no noise."""
    s = _check_mask(vs.views, mask)
    return vs.replace_views(np.clip(_synthesis(_analysis(vs.views) * s), 0.0, 1.0))


def apply_masks(views, masks):
    """Batched :func:`apply_mask` on arrays (B, 6, N, N) and (B, 6, 4, n, n)."""
    return np.clip(_synthesis(_analysis(views) * masks), 0.0, 1.0)


@dataclass
class MaskTrace:
    """Per-step objective values, shape (steps, batch)."""

    losses: list = field(default_factory=list)
    distortions: list = field(default_factory=list)


def optimize_masks(viewsets, target, cfg, warm_starts=None, seed=0, epoch=0, return_trace=False):
    """Fit one mask per view set against the frozen ``target``.

    All samples share a batched forward pass; each sample's objective and
    noise depend only on that sample, so results do not depend on which
    other samples are in the batch (up to BLAS blocking).  Noise for
    sample ``i`` at step ``k`` is seeded from (seed, sample_id, epoch, k).
    """
    require_frozen(target)
    viewsets = list(viewsets)
    if not viewsets:
        return ([], MaskTrace()) if return_trace else []
    x = np.stack([vs.views for vs in viewsets])
    b, r = len(viewsets), cfg.draws
    coeff_shape = _coeff_shape(x)
    h = _analysis(x)
    noise_mean, noise_std = _band_stats(h)

    s = np.ones((b,) + coeff_shape)
    for i, warm in enumerate(warm_starts or [None] * b):
        if warm is not None:
            s[i] = _check_mask(x[i], warm)

    # reference embeddings use the same batch layout as the obfuscated pass
    ref = embed(target, np.repeat(x, r, axis=0))
    h_b = h[:, None]
    trace = MaskTrace()
    for step in range(cfg.steps):
        v = np.stack([
            _draw(noise_mean[i], noise_std[i], np.random.default_rng(noise_seed(seed, vs.sample_id, epoch, step)),
                  (r,) + coeff_shape)
            for i, vs in enumerate(viewsets)
        ])
        st = ad.Tensor(s, requires_grad=True)
        sb = ad.reshape(st, (b, 1) + coeff_shape)
        coeff = ad.add(ad.hadamard(sb, h_b), ad.hadamard(ad.subtract(1.0, sb), v))
        y = ad.clip_values(idwt2_stacked(coeff), 0.0, 1.0)
        emb = forward(target, ad.reshape(y, (b * r,) + x.shape[1:]))
        dist = ad.squared_l2_distance(emb, ref, axis=-1)
        d_hat = ad.mean(ad.reshape(dist, (b, r)), axis=1)
        losses = d_hat.data + cfg.lam * s.reshape(b, -1).sum(axis=1)
        if not np.all(np.isfinite(losses)):
            bad = [viewsets[i].sample_id for i in np.flatnonzero(~np.isfinite(losses))]
            raise NumericError("non-finite mask loss", step=step, samples=bad)
        trace.losses.append(losses)
        trace.distortions.append(d_hat.data.copy())
        ad.sum_(d_hat).backward()
        s = np.clip(s - cfg.lr * (st.grad + cfg.lam), 0.0, 1.0)

    masks = [CoefficientMask(s[i], vs.sample_id) for i, vs in enumerate(viewsets)]
    return (masks, trace) if return_trace else masks


def optimize_mask(vs, target, cfg, warm_start=None, seed=0, epoch=0):
    return optimize_masks([vs], target, cfg, [warm_start], seed=seed, epoch=epoch)[0]


@dataclass
class ObjectiveEstimate:
    objective: float
    distortion: float
    distortion_se: float
    l1: float


def mask_objective(vs, mask, target, lam, seeds):
    """Monte-Carlo estimate of the mask objective over the given noise seeds."""
    require_frozen(target)
    s = _check_mask(vs.views, mask)
    noise = estimate_noise(vs)
    ys = np.stack([obfuscate(vs, s, noise, sd).views for sd in seeds])
    ref = embed(target, np.repeat(vs.views[None], len(seeds), axis=0))
    d = ((embed(target, ys) - ref) ** 2).sum(axis=1)
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
    l1 = float(s.sum())
    return ObjectiveEstimate(float(d.mean()) + lam * l1, float(d.mean()), se, l1)
