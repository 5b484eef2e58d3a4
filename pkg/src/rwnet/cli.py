"""Command-line entry points: projection and DWT dumps, the training
pipeline in three stages, mask explanations and ablation tables.

Run configuration is a single JSON document::

    {
      "seed": 0,
      "output_dir": "runs/demo",
      "model":   {"resolution": 32, "channels": [1, 8, 16, 32], ...},
      "rde":     {"lam": 0.01, "lr": 0.1, "steps": 30, "draws": 4},
      "train":   {"pretrain_epochs": 20, "epochs": 60, "way": 3, ...},
      "dataset": {"kind": "synthetic", "per_class": 80, ...}
    }

Every section is optional and unknown keys are rejected.  The top-level
seed (or ``RWNET_SEED``) seeds both model initialisation and episode
sampling; sections may not set their own seed, except the dataset, whose
seed fixes the generated samples.
"""

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import __version__
from .errors import ConfigurationError, RWNetError, StateError
from .geometry import VIEW_NAMES, load_point_cloud, normalize_unit_cube, project_six_views
from .model import Backbone, ModelConfig
from .pgm import read_pgm, to_gray, write_pgm
from .rde import MaskStore, RDEConfig, apply_mask, mask_objective, optimize_masks
from .training import (
    ABLATIONS,
    SyntheticSpec,
    TrainConfig,
    check_split_hygiene,
    evaluate,
    load_directory_dataset,
    make_fold_split,
    make_synthetic_dataset,
    pretrain,
    rows_to_csv,
    run_ablation,
    train,
)
from .wavelet import BANDS, band_to_gray, dwt2, idwt2

SEED_ENV = "RWNET_SEED"
EXPLAIN_DRAWS = 16


# -- configuration ----------------------------------------------------------------


def _section(cls, data, name, allow_seed=False):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section '{name}' must be an object")
    allowed = {f.name for f in fields(cls)}
    if not allow_seed:
        allowed.discard("seed")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad '{name}' section: {exc}") from None
    except ValueError as exc:
        raise ConfigurationError(f"bad '{name}' section: {exc}") from None


@dataclass
class DirectorySpec:
    root: str
    manifest: str = "labels.json"


def _dataset_section(data):
    data = dict(data or {"kind": "synthetic"})
    kind = data.pop("kind", "synthetic")
    if kind == "synthetic":
        return _section(SyntheticSpec, data, "dataset", allow_seed=True)
    if kind == "directory":
        return _section(DirectorySpec, data, "dataset")
    raise ConfigurationError(f"dataset kind must be 'synthetic' or 'directory', got {kind!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    rde: RDEConfig = field(default_factory=RDEConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: object = field(default_factory=SyntheticSpec)
    output_dir: str = "run"
    seed: int = 0

    _KEYS = ("seed", "output_dir", "model", "rde", "train", "dataset")

    @classmethod
    def from_dict(cls, data, env=None):
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = sorted(set(data) - set(cls._KEYS))
        if unknown:
            raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
        seed = data.get("seed", 0)
        env = os.environ if env is None else env
        if env.get(SEED_ENV, "").strip():
            try:
                seed = int(env[SEED_ENV])
            except ValueError:
                raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {seed!r}")
        output_dir = data.get("output_dir", "run")
        if not isinstance(output_dir, str) or not output_dir:
            raise ConfigurationError("output_dir must be a non-empty string")
        model = _section(ModelConfig, data.get("model"), "model")
        train_cfg = _section(TrainConfig, data.get("train"), "train")
        cfg = cls(
            model=replace(model, seed=seed),
            rde=_section(RDEConfig, data.get("rde"), "rde"),
            train=replace(train_cfg, seed=seed),
            dataset=_dataset_section(data.get("dataset")),
            output_dir=output_dir,
            seed=seed,
        )
        res = getattr(cfg.dataset, "resolution", cfg.model.resolution)
        if res != cfg.model.resolution:
            raise ConfigurationError(f"dataset resolution {res} differs from model resolution {cfg.model.resolution}")
        return cfg

    @classmethod
    def load(cls, path, env=None):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data, env)

    def to_dict(self):
        model = self.model.to_dict()
        model.pop("seed")
        train_cfg = self.train.to_dict()
        train_cfg.pop("seed")
        if isinstance(self.dataset, SyntheticSpec):
            dataset = {"kind": "synthetic", **self.dataset.to_dict()}
        else:
            dataset = {"kind": "directory", "root": self.dataset.root, "manifest": self.dataset.manifest}
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "model": model,
            "rde": self.rde.to_dict(),
            "train": train_cfg,
            "dataset": dataset,
        }

    def build_dataset(self):
        if isinstance(self.dataset, SyntheticSpec):
            return make_synthetic_dataset(self.dataset)
        return load_directory_dataset(self.dataset.root, self.dataset.manifest, self.model.resolution)


# -- run directory ----------------------------------------------------------------


def _atomic_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump_json(path, obj):
    _atomic_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


class RunDir:
    def __init__(self, root):
        self.root = root
        self.checkpoints = os.path.join(root, "checkpoints")
        self.masks = os.path.join(root, "masks")

    def create(self, cfg):
        for d in (self.root, self.checkpoints, self.masks):
            os.makedirs(d, exist_ok=True)
        _dump_json(os.path.join(self.root, "config.json"), cfg.to_dict())

    def ckpt(self, name):
        return os.path.join(self.checkpoints, name)

    def load_net(self, name, cfg):
        prefix = self.ckpt(name)
        if not os.path.exists(prefix + ".bin"):
            raise StateError(f"missing checkpoint {prefix}.bin; run the earlier stage first")
        net = Backbone.load(prefix, role=name)
        if net.config.to_dict() != cfg.model.to_dict():
            raise ConfigurationError(f"checkpoint {name} was written with a different model config")
        return net

    def metrics(self):
        path = os.path.join(self.root, "metrics.json")
        if not os.path.exists(path):
            return {}
        with open(path) as fh:
            return json.load(fh)

    def update_metrics(self, key, value):
        m = self.metrics()
        m[key] = value
        with open(os.path.join(self.root, "config.json")) as fh:
            m["config"] = json.load(fh)
        _dump_json(os.path.join(self.root, "metrics.json"), m)

    def store_prefix(self):
        return os.path.join(self.masks, "store")

    def load_store(self):
        prefix = self.store_prefix()
        return MaskStore.load(prefix) if os.path.exists(prefix + ".bin") else MaskStore()


def _prepare(cfg):
    run = RunDir(cfg.output_dir)
    run.create(cfg)
    dataset = cfg.build_dataset()
    split = make_fold_split(dataset.classes, cfg.train.n_folds, cfg.train.test_fold)
    check_split_hygiene(dataset, split)
    return run, dataset, split


# -- commands ---------------------------------------------------------------------


def cmd_project(args):
    pc = normalize_unit_cube(load_point_cloud(args.input))
    vs = project_six_views(pc, args.resolution)
    os.makedirs(args.out, exist_ok=True)
    paths = []
    for name, img in zip(VIEW_NAMES, vs.views):
        path = os.path.join(args.out, f"view_{name}.pgm")
        write_pgm(path, to_gray(img))
        paths.append(path)
    return paths


def cmd_dwt(args):
    """Sub-band images of an 8-bit PGM, working in raw gray levels."""
    img = read_pgm(args.image).astype(np.float64)
    sb = dwt2(img)
    os.makedirs(args.out, exist_ok=True)
    side = {"source": os.path.basename(args.image), "shape": list(img.shape), "bands": {}}
    for name, band in zip(BANDS, sb):
        write_pgm(os.path.join(args.out, f"{name}.pgm"), band_to_gray(band))
        side["bands"][name] = {"min": float(band.min()), "max": float(band.max())}
    if args.reconstruct:
        rec = idwt2(sb)
        gray = np.clip(np.round(rec), 0, 255).astype(np.uint8)
        write_pgm(os.path.join(args.out, "reconstruct.pgm"), gray)
        side["reconstruct_max_error"] = int(np.abs(gray.astype(int) - img.astype(int)).max())
    _dump_json(os.path.join(args.out, "dwt.json"), side)
    return side


def cmd_pretrain(args):
    cfg = RunConfig.load(args.config)
    run, dataset, split = _prepare(cfg)
    target = Backbone(cfg.model, role="target")
    history = pretrain(target, dataset, split, cfg.train)
    target.save(run.ckpt("pretrained"))
    target.save(run.ckpt("target"))
    run.update_metrics("pretrain", {"loss": history, "target_fingerprint": target.fingerprint()})
    return history


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    run, dataset, split = _prepare(cfg)
    target = run.load_net("pretrained", cfg).freeze()
    model = run.load_net("pretrained", cfg)
    store = MaskStore()
    records = train(model, target, store, dataset, split, cfg.train, cfg.rde, use_rde=not args.no_rde)
    model.save(run.ckpt("model"))
    target.save(run.ckpt("target"))
    store.save(run.store_prefix())
    run.update_metrics("train", {
        "epochs": [vars(r) for r in records],
        "model_fingerprint": model.fingerprint(),
        "use_rde": not args.no_rde,
    })
    return records


def _write_episodes(path, accs):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "accuracy"])
    for i, a in enumerate(accs):
        w.writerow([i, repr(a)])
    _atomic_text(path, buf.getvalue())


def cmd_eval(args):
    cfg = RunConfig.load(args.config)
    if cfg.train.eval_episodes < 2:
        raise ConfigurationError(f"evaluation needs at least 2 episodes, got {cfg.train.eval_episodes}")
    run, dataset, split = _prepare(cfg)
    which = args.which
    model = run.load_net(which, cfg).freeze()
    target = model if which == "pretrained" else run.load_net("target", cfg).freeze()
    store = MaskStore() if which == "pretrained" else run.load_store()
    res = evaluate(model, target, store, dataset, split, cfg.train, cfg.rde)
    suffix = "" if which == "model" else f"_{which}"
    _write_episodes(os.path.join(run.root, f"episodes{suffix}.csv"), res.accuracies)
    run.update_metrics(f"eval{suffix}", {
        "checkpoint": which,
        "accuracy": res.mean,
        "ci_half_width": res.half_width,
        "episodes": len(res.accuracies),
        "mask_density": res.mask_density,
        "masking": cfg.train.eval_masking,
    })
    return res


def mask_tiles(values):
    """(6, 4, n, n) mask -> six (2n, 2n) images laid out [[ll, lh], [hl, hh]]."""
    top = np.concatenate([values[:, 0], values[:, 1]], axis=-1)
    bottom = np.concatenate([values[:, 2], values[:, 3]], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def cmd_explain(args):
    cfg = RunConfig.load(args.config)
    pc = normalize_unit_cube(load_point_cloud(args.sample))
    vs = project_six_views(pc, cfg.model.resolution)
    run = RunDir(cfg.output_dir)
    if os.path.exists(run.ckpt("target") + ".bin"):
        target, source = run.load_net("target", cfg), "checkpoint"
    else:
        target, source = Backbone(cfg.model, role="target"), "initial"
    target.freeze()
    (mask,), trace = optimize_masks([vs], target, cfg.rde, seed=cfg.seed, return_trace=True)
    out = args.out or os.path.join(cfg.output_dir, "explain", vs.sample_id)
    os.makedirs(out, exist_ok=True)
    for view, tile in zip(VIEW_NAMES, mask_tiles(mask.values)):
        write_pgm(os.path.join(out, f"mask_{view}.pgm"), to_gray(tile))
    masked = apply_mask(vs, mask)
    est = mask_objective(vs, mask, target, cfg.rde.lam, [[cfg.seed, 7, k] for k in range(EXPLAIN_DRAWS)])
    for name, img in zip(VIEW_NAMES, masked.views):
        write_pgm(os.path.join(out, f"masked_{name}.pgm"), to_gray(img))
    side = {
        "sample_id": vs.sample_id,
        "target": source,
        "target_fingerprint": target.fingerprint(),
        "lam": cfg.rde.lam,
        "steps": cfg.rde.steps,
        "draws": cfg.rde.draws,
        "density": mask.density,
        "band_density": {b: float(mask.values[:, i].mean()) for i, b in enumerate(BANDS)},
        "distortion": [float(d[0]) for d in trace.distortions],
        "loss": [float(l[0]) for l in trace.losses],
        "final_loss": est.objective,
        "final_distortion": est.distortion,
        "final_distortion_se": est.distortion_se,
    }
    _dump_json(os.path.join(out, "explain.json"), side)
    return side


def cmd_ablate(args):
    cfg = RunConfig.load(args.config)
    dataset = cfg.build_dataset()
    seeds = args.seeds if args.seeds else [cfg.seed]
    rows = run_ablation(args.kind, dataset, cfg.model, cfg.train, cfg.rde, seeds=seeds, values=args.values)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = args.out or os.path.join(cfg.output_dir, f"ablation_{args.kind}.csv")
    _atomic_text(path, rows_to_csv(rows))
    return rows


# -- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _values(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        try:
            out.append(float(part))
        except ValueError:
            out.append(part)
    return out


def build_parser():
    p = _Parser(prog="rwnet", description="Wavelet few-shot point cloud pipeline")
    p.add_argument("--version", action="version", version=f"rwnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("project", help="six depth views of a point cloud as PGM files")
    s.add_argument("input")
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("dwt", help="Haar sub-bands of a PGM image")
    s.add_argument("image")
    s.add_argument("--out", required=True)
    s.add_argument("--reconstruct", action="store_true", help="also write the inverse transform")
    s.set_defaults(func=cmd_dwt)

    for name, func, text in (
        ("pretrain", cmd_pretrain, "episodic pre-training of the target network"),
        ("train", cmd_train, "mask-filtered training with target copies"),
        ("eval", cmd_eval, "episodic evaluation with a 95% interval"),
    ):
        s = sub.add_parser(name, help=text)
        s.add_argument("config")
        if name == "train":
            s.add_argument("--no-rde", action="store_true", help="control run on unmasked views")
        if name == "eval":
            s.add_argument("--which", choices=("model", "pretrained"), default="model")
        s.set_defaults(func=func)

    s = sub.add_parser("explain", help="fit and dump the coefficient mask of one sample")
    s.add_argument("config")
    s.add_argument("sample")
    s.add_argument("--out")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("ablate", help="run an ablation matrix and write a CSV table")
    s.add_argument("config")
    s.add_argument("--kind", choices=ABLATIONS, required=True)
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--values", type=_values, help="comma-separated lambdas or variants")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)
    return p


def _one_line(exc):
    return " ".join(str(exc).split())


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except RWNetError as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = f" {exc.filename}" if exc.filename else ""
        print(f"error: OSError:{where} {exc.strerror or _one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
