"""Episodic pre-training, mask-filtered training with a periodically
refreshed target network, evaluation and ablation runs."""

import csv
import io
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, InvalidInputError, NumericError
from .geometry import (
    SHAPE_KINDS,
    PointCloud,
    ViewSet,
    load_point_cloud,
    normalize_unit_cube,
    project_six_views,
    random_rotation,
    synth_shape,
)
from .model import Backbone, ModelConfig, copy_parameters, embed, episode_loss, forward, proto_head, require_frozen
from .rde import MaskStore, RDEConfig, apply_masks, optimize_masks

PHASES = ("train", "test")
ABLATIONS = ("lambda_sweep", "wa_variant", "pretrained_vs_final")

# seed-material tags so that pretraining, training and evaluation draw
# from unrelated streams
_PRETRAIN, _TRAIN, _EVAL, _PROBE = 1, 2, 3, 4


@dataclass
class TrainConfig:
    pretrain_epochs: int = 20
    epochs: int = 60
    copy_period: int = 20
    lr: float = 1e-4
    way: int = 5
    shot: int = 1
    query: int = 10
    episodes_per_epoch: int = 1
    pretrain_episodes_per_epoch: int = 100
    eval_episodes: int = 200
    n_folds: int = 2
    test_fold: int = 0
    eval_masking: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.pretrain_epochs < 0:
            raise ConfigurationError("pretrain_epochs must be >= 0")
        for name in ("epochs", "copy_period", "way", "shot", "query", "episodes_per_epoch",
                     "pretrain_episodes_per_epoch", "eval_episodes", "n_folds"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.copy_period > self.epochs:
            raise ConfigurationError(f"copy_period ({self.copy_period}) exceeds epochs ({self.epochs})")
        if not 0 <= self.test_fold < self.n_folds:
            raise ConfigurationError(f"test_fold {self.test_fold} is not in 0..{self.n_folds - 1}")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")

    def to_dict(self):
        return asdict(self)


# -- data -------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Shape classes with per-sample pose and proportion variation."""

    kinds: tuple = SHAPE_KINDS
    per_class: int = 80
    n_points: int = 1024
    resolution: int = 32
    max_rotation: float = 180.0
    scale_range: tuple = (0.6, 1.0)
    jitter: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        unknown = [k for k in self.kinds if k not in SHAPE_KINDS]
        if unknown:
            raise ConfigurationError(f"unknown shape kinds: {', '.join(unknown)}")
        if len(set(self.kinds)) != len(self.kinds) or not self.kinds:
            raise ConfigurationError("shape kinds must be distinct and non-empty")
        if self.per_class < 1:
            raise ConfigurationError("per_class must be positive")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"bad scale_range {self.scale_range}")

    def to_dict(self):
        d = asdict(self)
        d["kinds"], d["scale_range"] = list(self.kinds), list(self.scale_range)
        return d


class Dataset:
    """Projected samples with integer class labels."""

    def __init__(self, samples, class_names=None):
        self.samples = list(samples)
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("sample ids must be unique within a dataset")
        self._index = {sid: i for i, sid in enumerate(ids)}
        self.by_class = {}
        for i, s in enumerate(self.samples):
            self.by_class.setdefault(s.label, []).append(i)
        self.classes = sorted(self.by_class)
        self.class_names = class_names or {c: str(c) for c in self.classes}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def views(self, indices):
        return np.stack([self.samples[i].views for i in indices])

    def labels(self, indices):
        return [self.samples[i].label for i in indices]


def _synthetic_cloud(spec, label, i):
    kind = spec.kinds[label]
    rng = np.random.default_rng([spec.seed, label, i])
    pc = synth_shape(kind, spec.n_points, seed=int(rng.integers(2**31)))
    pts = pc.points * rng.uniform(*spec.scale_range, size=3)
    if spec.max_rotation > 0:
        pts = pts @ random_rotation(rng, spec.max_rotation).T
    if spec.jitter > 0:
        pts = pts + rng.normal(0.0, spec.jitter, pts.shape)
    return normalize_unit_cube(PointCloud(pts, label=label, sample_id=f"{kind}-{i:04d}"))


def make_synthetic_dataset(spec=None):
    spec = spec or SyntheticSpec()
    samples = []
    for label in range(len(spec.kinds)):
        for i in range(spec.per_class):
            pc = _synthetic_cloud(spec, label, i)
            samples.append(project_six_views(pc, spec.resolution))
    return Dataset(samples, {label: kind for label, kind in enumerate(spec.kinds)})


def load_directory_dataset(root, manifest="labels.json", resolution=32):
    """OFF/XYZ files listed in a JSON manifest ``{relative path: class name}``."""
    import json

    path = os.path.join(root, manifest)
    try:
        with open(path) as fh:
            entries = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read labels manifest {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise ConfigurationError(f"labels manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(entries, dict) or not entries:
        raise ConfigurationError("labels manifest must be a non-empty object mapping files to classes")
    names = sorted({str(v) for v in entries.values()})
    label_of = {name: i for i, name in enumerate(names)}
    samples = []
    for rel in sorted(entries):
        pc = load_point_cloud(os.path.join(root, rel), label=label_of[str(entries[rel])])
        pc.sample_id = rel
        samples.append(project_six_views(normalize_unit_cube(pc), resolution))
    return Dataset(samples, {i: name for name, i in label_of.items()})


# -- folds and episodes -----------------------------------------------------------


@dataclass
class FoldSplit:
    folds: list
    test_fold: int

    def __post_init__(self):
        flat = [c for f in self.folds for c in f]
        if len(set(flat)) != len(flat):
            raise ConfigurationError("folds overlap")
        if not 0 <= self.test_fold < len(self.folds):
            raise ConfigurationError(f"test_fold {self.test_fold} out of range")

    @property
    def test_classes(self):
        return list(self.folds[self.test_fold])

    @property
    def train_classes(self):
        return [c for i, f in enumerate(self.folds) if i != self.test_fold for c in f]

    def pool(self, phase):
        if phase not in PHASES:
            raise InvalidInputError(f"phase must be one of {PHASES}, got {phase!r}")
        return self.train_classes if phase == "train" else self.test_classes


def make_fold_split(classes, n_folds, test_fold):
    """Consecutive runs of the sorted classes; sizes differ by at most one."""
    classes = sorted(classes)
    if n_folds < 2 or n_folds > len(classes):
        raise ConfigurationError(f"cannot split {len(classes)} classes into {n_folds} folds")
    bounds = np.linspace(0, len(classes), n_folds + 1).round().astype(int)
    folds = [classes[bounds[i]:bounds[i + 1]] for i in range(n_folds)]
    return FoldSplit(folds, test_fold)


@dataclass
class Episode:
    classes: list
    support: list
    support_labels: list
    query: list
    query_labels: list

    @property
    def indices(self):
        return self.support + self.query


def sample_episode(dataset, split, phase, cfg, seed):
    """Draw an N-way K-shot episode from the phase's class pool."""
    pool = split.pool(phase)
    need = cfg.shot + cfg.query
    if len(pool) < cfg.way:
        raise ConfigurationError(f"{phase} pool has {len(pool)} classes, {cfg.way}-way episodes need {cfg.way}")
    short = {c: len(dataset.by_class.get(c, [])) for c in pool if len(dataset.by_class.get(c, [])) < need}
    if short:
        detail = ", ".join(f"class {c} has {n}" for c, n in sorted(short.items()))
        raise ConfigurationError(f"{phase} episodes need {need} samples per class: {detail}")
    rng = np.random.default_rng(seed)
    classes = [pool[i] for i in rng.choice(len(pool), cfg.way, replace=False)]
    ep = Episode(classes, [], [], [], [])
    for c in classes:
        members = dataset.by_class[c]
        picks = [members[i] for i in rng.choice(len(members), need, replace=False)]
        ep.support += picks[:cfg.shot]
        ep.support_labels += [c] * cfg.shot
        ep.query += picks[cfg.shot:]
        ep.query_labels += [c] * cfg.query
    return ep


def check_split_hygiene(dataset, split):
    train, test = set(split.train_classes), set(split.test_classes)
    if train & test:
        raise ConfigurationError(f"classes in both phases: {sorted(train & test)}")
    train_ids = {dataset[i].sample_id for c in train for i in dataset.by_class.get(c, [])}
    test_ids = {dataset[i].sample_id for c in test for i in dataset.by_class.get(c, [])}
    if train_ids & test_ids:
        raise ConfigurationError("samples shared between train and test phases")


# -- training ---------------------------------------------------------------------


def _episode_step(net, x, ep, opt):
    k = len(ep.support)
    emb = forward(net, x)
    logits, classes = proto_head(emb[:k], ep.support_labels, emb[k:])
    loss = episode_loss(logits, ep.query_labels, classes)
    if not np.isfinite(loss.data):
        return float(loss.data)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.data)


def probe_loss(net, dataset, split, cfg):
    """Loss of ``net`` on a fixed training-pool episode, without updates."""
    ep = sample_episode(dataset, split, "train", cfg, [cfg.seed, _PROBE])
    k = len(ep.support)
    emb = embed(net, dataset.views(ep.indices))
    with ad.no_grad():
        logits, classes = proto_head(emb[:k], ep.support_labels, emb[k:])
        return float(episode_loss(logits, ep.query_labels, classes).data)


def pretrain(target, dataset, split, cfg, model=None):
    """Episodic training of the target on unmasked views; returns per-epoch mean loss.

    The target is frozen afterwards.  When ``model`` is given it receives a
    copy of the pretrained parameters.
    """
    target.unfreeze()
    opt = ad.Adam(target.parameters(), cfg.lr)
    history = []
    for epoch in range(cfg.pretrain_epochs):
        losses = []
        for e in range(cfg.pretrain_episodes_per_epoch):
            ep = sample_episode(dataset, split, "train", cfg, [cfg.seed, _PRETRAIN, epoch, e])
            loss = _episode_step(target, dataset.views(ep.indices), ep, opt)
            if not np.isfinite(loss):
                raise NumericError("non-finite pretraining loss", epoch=epoch, episode=e)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    target.freeze()
    if model is not None:
        copy_parameters(target, model)
    return history


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    mask_density: float
    target_fingerprint: str
    copied: bool


def masked_views(dataset, indices, target, store, rde_cfg, seed, epoch, warm=True):
    """Optimise (or warm-start) masks for ``indices`` and return the masked views.

    With ``warm`` every sample is re-optimised starting from its stored mask;
    otherwise stored masks are used as they are and only unseen samples
    are fitted from all ones.
    """
    vss = [dataset[i] for i in indices]
    todo = [j for j, vs in enumerate(vss) if warm or vs.sample_id not in store]
    if todo:
        fitted = optimize_masks(
            [vss[j] for j in todo], target, rde_cfg,
            warm_starts=[store.get(vss[j].sample_id) for j in todo], seed=seed, epoch=epoch,
        )
        for m in fitted:
            store.put(m.sample_id, m)
    masks = np.stack([store.get(vs.sample_id).values for vs in vss])
    return apply_masks(np.stack([vs.views for vs in vss]), masks), masks


def train(model, target, store, dataset, split, cfg, rde_cfg, use_rde=True, on_epoch=None):
    """Train ``model`` on mask-filtered views; the target is refreshed every
    ``copy_period`` epochs.  Returns a list of EpochRecord.

    With ``use_rde=False`` the views go in unmasked (the control run).
    """
    require_frozen(target)
    model.unfreeze()
    opt = ad.Adam(model.parameters(), cfg.lr)
    records = []
    for epoch in range(1, cfg.epochs + 1):
        fingerprint = target.fingerprint()
        losses, densities = [], []
        for e in range(cfg.episodes_per_epoch):
            ep = sample_episode(dataset, split, "train", cfg, [cfg.seed, _TRAIN, epoch, e])
            if use_rde:
                try:
                    x, masks = masked_views(dataset, ep.indices, target, store, rde_cfg, cfg.seed, epoch)
                except NumericError as exc:
                    raise NumericError(str(exc), epoch=epoch, episode=e) from None
                densities.append(float(masks.mean()))
            else:
                x = dataset.views(ep.indices)
            loss = _episode_step(model, x, ep, opt)
            if not np.isfinite(loss):
                raise NumericError("non-finite training loss", epoch=epoch, episode=e,
                                   samples=[dataset[i].sample_id for i in ep.indices])
            losses.append(loss)
        if target.fingerprint() != fingerprint:
            raise NumericError("target parameters changed between copies", epoch=epoch)
        copied = epoch % cfg.copy_period == 0
        if copied:
            copy_parameters(model, target)
        rec = EpochRecord(epoch, float(np.mean(losses)), float(np.mean(densities)) if densities else 1.0,
                          fingerprint, copied)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    model.freeze()
    return records


# -- evaluation -------------------------------------------------------------------


def ci_half_width(accuracies):
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        raise ConfigurationError(f"a confidence interval needs at least 2 episodes, got {acc.size}")
    return float(1.96 * acc.std(ddof=1) / np.sqrt(acc.size))


@dataclass
class EvalResult:
    mean: float
    half_width: float
    accuracies: list = field(default_factory=list)
    mask_density: float = 1.0


def evaluate(model, target, store, dataset, split, cfg, rde_cfg, episodes=None, masking=None):
    """Mean query accuracy over test episodes with a 95% normal interval.

    With masking on, test samples without a stored mask get one fitted
    against the frozen target from all ones; stored masks are reused.
    """
    n_ep = cfg.eval_episodes if episodes is None else episodes
    if n_ep < 2:
        raise ConfigurationError(f"evaluation needs at least 2 episodes, got {n_ep}")
    masking = cfg.eval_masking if masking is None else masking
    if masking:
        require_frozen(target)
    accs, densities = [], []
    for e in range(n_ep):
        ep = sample_episode(dataset, split, "test", cfg, [cfg.seed, _EVAL, e])
        if masking:
            x, masks = masked_views(dataset, ep.indices, target, store, rde_cfg, cfg.seed, 0, warm=False)
            densities.append(float(masks.mean()))
        else:
            x = dataset.views(ep.indices)
        emb = embed(model, x)
        k = len(ep.support)
        with ad.no_grad():
            logits, classes = proto_head(emb[:k], ep.support_labels, emb[k:])
        pred = [classes[j] for j in np.argmax(logits.data, axis=1)]
        accs.append(float(np.mean([p == t for p, t in zip(pred, ep.query_labels)])))
    return EvalResult(float(np.mean(accs)), ci_half_width(accs), accs,
                      float(np.mean(densities)) if densities else 1.0)


# -- full pipeline and ablations ---------------------------------------------------


@dataclass
class PipelineResult:
    model: Backbone
    target: Backbone
    pretrained: Backbone
    store: MaskStore
    pretrain_history: list
    epochs: list
    pretrained_eval: EvalResult = None
    final_eval: EvalResult = None


def snapshot(net, role):
    out = Backbone(net.config, role=role)
    copy_parameters(net, out)
    return out.freeze() if net.frozen else out


def run_pipeline(dataset, model_cfg, cfg, rde_cfg, use_rde=True, evaluate_pretrained=False, on_epoch=None):
    split = make_fold_split(dataset.classes, cfg.n_folds, cfg.test_fold)
    check_split_hygiene(dataset, split)
    target = Backbone(model_cfg, role="target")
    model = Backbone(model_cfg, role="model")
    history = pretrain(target, dataset, split, cfg, model=model)
    pretrained = snapshot(target, "pretrained")
    result = PipelineResult(model, target, pretrained, MaskStore(), history, [])
    if evaluate_pretrained:
        result.pretrained_eval = evaluate(pretrained, pretrained, MaskStore(), dataset, split, cfg, rde_cfg)
    result.epochs = train(model, target, result.store, dataset, split, cfg, rde_cfg, use_rde, on_epoch)
    result.final_eval = evaluate(model, target, result.store, dataset, split, cfg, rde_cfg)
    return result


def _median_row(rows):
    accs = [r["accuracy"] for r in rows]
    mid = sorted(range(len(accs)), key=lambda i: (accs[i], i))[(len(accs) - 1) // 2]
    return rows[mid]


def run_ablation(kind, dataset, model_cfg, cfg, rde_cfg, seeds=(0,), values=None):
    """Run one ablation matrix; returns a list of row dicts (one per cell).

    lambda_sweep: one pipeline per lambda, mean test mask density included.
    wa_variant: one pipeline per attention variant and seed, median over seeds.
    pretrained_vs_final: pretrained target versus final model on the same episodes.
    Rows for multi-seed cells report the median-accuracy seed's numbers.
    """
    if kind not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {kind!r}; choose from {', '.join(ABLATIONS)}")
    rows = []
    if kind == "lambda_sweep":
        for lam in values or (0.01, 1.0, 10.0, 100.0):
            cell = []
            for seed in seeds:
                res = run_pipeline(dataset, replace(model_cfg, seed=seed), replace(cfg, seed=seed),
                                   replace(rde_cfg, lam=float(lam)))
                ev = res.final_eval
                cell.append({"lambda": float(lam), "seed": seed, "accuracy": ev.mean,
                             "ci_half_width": ev.half_width, "mask_density": ev.mask_density})
            rows.append(_median_row(cell))
    elif kind == "wa_variant":
        from .wavelet import WA_VARIANTS

        for variant in values or WA_VARIANTS:
            cell = []
            for seed in seeds:
                res = run_pipeline(dataset, replace(model_cfg, wa_variant=variant, seed=seed),
                                   replace(cfg, seed=seed), rde_cfg)
                ev = res.final_eval
                cell.append({"variant": variant, "seed": seed, "accuracy": ev.mean,
                             "ci_half_width": ev.half_width})
            rows.append(_median_row(cell))
    else:
        cells = {"pretrained": [], "final": []}
        for seed in seeds:
            res = run_pipeline(dataset, replace(model_cfg, seed=seed), replace(cfg, seed=seed), rde_cfg,
                               evaluate_pretrained=True)
            for name, ev in (("pretrained", res.pretrained_eval), ("final", res.final_eval)):
                cells[name].append({"model": name, "seed": seed, "accuracy": ev.mean,
                                    "ci_half_width": ev.half_width})
        rows = [_median_row(cells["pretrained"]), _median_row(cells["final"])]
    return rows


def rows_to_csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
