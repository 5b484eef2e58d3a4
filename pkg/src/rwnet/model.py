"""Multi-view wavelet-attention backbone and the prototype few-shot head."""

import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, InvalidInputError
from .geometry import ViewSet
from .wavelet import WA_VARIANTS, wa_block

N_VIEWS = 6


@dataclass
class ModelConfig:
    resolution: int = 32
    channels: tuple = (1, 8, 16, 32)
    embedding_dim: int = 64
    wa_variant: str = "standard"
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    @property
    def stages(self):
        return len(self.channels) - 1

    @property
    def pooled_dim(self):
        return 2 * self.channels[-1]

    def validate(self):
        if self.stages < 1:
            raise InvalidInputError("need at least one stage (two channel entries)")
        if self.channels[0] != 1:
            raise InvalidInputError("the first channel count is the depth image itself and must be 1")
        r = self.resolution
        if r < 2 or r & (r - 1):
            raise InvalidInputError(f"resolution must be a power of two, got {r}")
        if r // 2**self.stages < 2:
            raise InvalidInputError(
                f"resolution {r} is too small for {self.stages} halving stages (final map must be >= 2)"
            )
        if self.embedding_dim < 1:
            raise InvalidInputError("embedding_dim must be positive")
        if self.wa_variant not in WA_VARIANTS:
            raise InvalidInputError(f"unknown wa_variant {self.wa_variant!r}")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class Backbone:
    """Parameter container for one copy of the network (trainable or target)."""

    def __init__(self, config=None, role="model"):
        self.config = config or ModelConfig()
        self.role = role
        self.params = OrderedDict()
        self.frozen = False
        rng = np.random.default_rng(self.config.seed)
        ch = self.config.channels
        for s in range(1, self.config.stages + 1):
            for branch in ("view", "pool"):
                self.params[f"stage{s}.{branch}.weight"] = _glorot(rng, ch[s - 1], ch[s], (ch[s], ch[s - 1]))
                self.params[f"stage{s}.{branch}.bias"] = np.zeros((ch[s], 1))
        d_in, d = self.config.pooled_dim, self.config.embedding_dim
        self.params["mlp.hidden.weight"] = _glorot(rng, d_in, d, (d_in, d))
        self.params["mlp.hidden.bias"] = np.zeros(d)
        self.params["mlp.out.weight"] = _glorot(rng, d, d, (d, d))
        self.params["mlp.out.bias"] = np.zeros(d)
        for name, value in self.params.items():
            self.params[name] = ad.Tensor(value, requires_grad=True)

    def parameters(self):
        return list(self.params.values())

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True
        return self

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        if list(state) != list(self.params):
            raise InvalidInputError("parameter names do not match this backbone")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.params[name].shape:
                raise InvalidInputError(f"shape mismatch for {name}: {value.shape} vs {self.params[name].shape}")
            self.params[name].data = value.copy()

    def fingerprint(self):
        """SHA-256 over all parameter bytes, in name order."""
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, prefix):
        return ad.save_parameters(prefix, self.state_dict(), {"model_config": self.config.to_dict(), "role": self.role})

    @classmethod
    def load(cls, prefix, role=None):
        state, manifest = ad.load_parameters(prefix)
        cfg = ModelConfig(**manifest["model_config"])
        net = cls(cfg, role=role or manifest.get("role", "model"))
        net.load_state_dict(state)
        return net


def copy_parameters(src, dst):
    """Overwrite ``dst``'s parameters with copies of ``src``'s.

    The destination keeps its frozen/trainable status.
    """
    if list(src.params) != list(dst.params):
        raise InvalidInputError("copy_parameters: backbones have different parameter sets")
    for name, p in src.params.items():
        if p.shape != dst.params[name].shape:
            raise InvalidInputError(f"copy_parameters: shape mismatch for {name}")
    for name, p in src.params.items():
        dst.params[name].data = p.data.copy()


def view_pool(per_view, axis=None):
    """Element-wise max across the six views.

    Accepts a sequence of six same-shape tensors, or one tensor whose
    ``axis`` has length six.
    """
    if axis is None:
        per_view = [ad.as_tensor(v) for v in per_view]
        if len(per_view) != N_VIEWS:
            raise InvalidInputError(f"view_pool needs {N_VIEWS} views, got {len(per_view)}")
        shape = per_view[0].shape
        if any(v.shape != shape for v in per_view):
            raise InvalidInputError("view_pool: views have different shapes")
        stacked = ad.concat([ad.reshape(v, (1,) + shape) for v in per_view], axis=0)
        return ad.max_over(stacked, axis=0)
    per_view = ad.as_tensor(per_view)
    if per_view.shape[axis] != N_VIEWS:
        raise InvalidInputError(f"view_pool needs {N_VIEWS} views on axis {axis}, got {per_view.shape[axis]}")
    return ad.max_over(per_view, axis=axis)


def _channel_mix(x, weight, bias):
    lead, (c, n, _) = x.shape[:-3], x.shape[-3:]
    flat = ad.reshape(x, lead + (c, n * n))
    out = ad.relu(ad.add(ad.matmul(weight, flat), bias))
    return ad.reshape(out, lead + (weight.shape[0], n, n))


def _as_batch(views, resolution):
    if isinstance(views, ViewSet):
        views = views.views
    if isinstance(views, (list, tuple)):
        views = np.stack([v.views if isinstance(v, ViewSet) else v for v in views])
    x = ad.as_tensor(views)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != N_VIEWS:
        raise InvalidInputError(f"expected views of shape (B, 6, N, N), got {x.shape}")
    if x.shape[-1] != resolution or x.shape[-2] != resolution:
        raise InvalidInputError(f"view resolution {x.shape[-1]} does not match model resolution {resolution}")
    return x


def forward(backbone, views, return_stages=False):
    """Embed a batch of view sets, returning a (B, embedding_dim) Tensor.

    Each stage runs a per-view branch (WA block, channel mixing, relu) and a
    pooled branch on the previous fused map; the fused output is the pooled
    branch plus the view-pooled per-view features.  The last fused map is
    reduced by spatial mean and max per channel, then a two-layer MLP.
    """
    cfg = backbone.config
    p = backbone.params
    x = _as_batch(views, cfg.resolution)
    b = x.shape[0]
    per_view = ad.reshape(x, (b, N_VIEWS, 1) + x.shape[-2:])
    fused = view_pool(per_view, axis=1)
    stages = []
    for s in range(1, cfg.stages + 1):
        per_view = _channel_mix(wa_block(per_view, cfg.wa_variant), p[f"stage{s}.view.weight"], p[f"stage{s}.view.bias"])
        pooled = _channel_mix(wa_block(fused, cfg.wa_variant), p[f"stage{s}.pool.weight"], p[f"stage{s}.pool.bias"])
        fused = ad.add(pooled, view_pool(per_view, axis=1))
        stages.append(fused)
    c, n = fused.shape[1], fused.shape[-1]
    flat = ad.reshape(fused, (b, c, n * n))
    pooled_set = ad.concat([ad.mean(flat, axis=-1), ad.max_over(flat, axis=-1)], axis=-1)
    hidden = ad.relu(ad.add(ad.matmul(pooled_set, p["mlp.hidden.weight"]), p["mlp.hidden.bias"]))
    emb = ad.add(ad.matmul(hidden, p["mlp.out.weight"]), p["mlp.out.bias"])
    if return_stages:
        return emb, stages, pooled_set
    return emb


def embed(backbone, views):
    """Forward pass without graph recording; returns a (B, D) array."""
    with ad.no_grad():
        return forward(backbone, views).data


# -- few-shot head ----------------------------------------------------------------


def proto_head(support_emb, support_labels, query_emb):
    """Negative squared distances from each query to each class prototype.

    Returns (logits Tensor of shape (M, N), sorted class list).
    """
    support_emb = ad.as_tensor(support_emb)
    query_emb = ad.as_tensor(query_emb)
    labels = list(support_labels)
    if support_emb.ndim != 2 or len(labels) != support_emb.shape[0]:
        raise InvalidInputError("proto_head: need one label per support embedding")
    if query_emb.ndim != 2 or query_emb.shape[1] != support_emb.shape[1]:
        raise InvalidInputError("proto_head: query and support embeddings differ in width")
    classes = sorted(set(labels))
    if not classes:
        raise InvalidInputError("proto_head: empty support set")
    avg = np.zeros((len(classes), len(labels)))
    for j, lab in enumerate(labels):
        avg[classes.index(lab), j] = 1.0
    avg /= avg.sum(axis=1, keepdims=True)
    protos = ad.matmul(avg, support_emb)
    m, n, d = query_emb.shape[0], len(classes), support_emb.shape[1]
    diff = ad.subtract(ad.reshape(query_emb, (m, 1, d)), ad.reshape(protos, (1, n, d)))
    logits = ad.scalar_multiply(ad.sum_(ad.hadamard(diff, diff), axis=-1), -1.0)
    return logits, classes


def episode_loss(logits, query_labels, classes):
    """Mean cross-entropy of the query predictions."""
    index = {c: i for i, c in enumerate(classes)}
    try:
        targets = [index[lab] for lab in query_labels]
    except KeyError as exc:
        raise InvalidInputError(f"query label {exc.args[0]!r} is not an episode class") from None
    return ad.negative_log_likelihood(ad.log_softmax(logits, axis=-1), targets)


def require_frozen(backbone):
    if not backbone.frozen:
        raise ContractError(f"the {backbone.role} backbone must be frozen here")
