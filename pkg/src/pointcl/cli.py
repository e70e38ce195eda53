"""Command-line surface: gen-data, pretrain, probe, finetune, segment,
ablate, export-features.

Each command reads an optional `key = value` configuration file, applies
flag overrides, validates everything against the schema up front, then
writes its artifacts under --out together with the resolved configuration.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

import numpy as np

from . import evaluation, models, training
from .losses import LossConfig
from .pointcloud import (Dataset, SyntheticSpec, SHAPE_CLASSES,
                         generate_synthetic_dataset, load_dataset, save_dataset)
from .training import TrainConfig, pretrain
from .transforms import parse_transform


class ConfigError(ValueError):
    pass


# key -> (parser, default); the single source of truth for RunConfig keys
_SCHEMA = {
    "transform": (str, "rotate:y:180"),
    "pairs": (int, 16),
    "epochs": (int, 30),
    "points": (int, 128),
    "tau": (float, 0.1),
    "symmetric": (lambda s: _parse_bool(s), False),
    "normalize": (lambda s: _parse_bool(s), True),
    "exclude_positive": (lambda s: _parse_bool(s), False),
    "lr_init": (float, 0.001),
    "lr_floor": (float, 1e-5),
    "lr_decay_gamma": (float, 0.7),
    "decay_period_steps": (int, 0),
    "bn_init": (float, 0.5),
    "bn_cap": (float, 0.99),
    "seed": (int, 0),
    "jitter_augment": (lambda s: _parse_bool(s), False),
    "encoder_widths": (lambda s: [int(t) for t in str(s).split(",")], [32, 64, 128]),
    "head_widths": (lambda s: [int(t) for t in str(s).split(",")], [64, 32]),
    "seg_widths": (lambda s: [int(t) for t in str(s).split(",")], [64, 32]),
    "dropout": (float, 0.7),
    "probe_epochs": (int, 100),
    "finetune_epochs": (int, 20),
    "features": (str, "encoder"),
}


def _parse_bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("true", "1", "yes", "on"):
        return True
    if str(s).lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def read_config_file(path) -> dict:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = s.partition("=")
            key, val = key.strip(), val.strip().strip('"')
            if key not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            parser, _ = _SCHEMA[key]
            try:
                out[key] = parser(val)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}")
    return out


def resolve_config(args) -> dict:
    cfg = {k: d for k, (_, d) in _SCHEMA.items()}
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    for key, (parser, _) in _SCHEMA.items():
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = parser(flag) if isinstance(flag, str) else flag
    parse_transform(cfg["transform"])  # validate before any work
    if cfg["features"] not in ("encoder", "head", "both"):
        raise ConfigError(
            f"features must be 'encoder', 'head' or 'both', got {cfg['features']!r}")
    return cfg


def make_train_config(cfg) -> TrainConfig:
    return TrainConfig(
        pairs_per_batch=cfg["pairs"], epochs=cfg["epochs"],
        points_per_cloud=cfg["points"], lr_init=cfg["lr_init"],
        lr_floor=cfg["lr_floor"], lr_decay_gamma=cfg["lr_decay_gamma"],
        decay_period_steps=cfg["decay_period_steps"], bn_init=cfg["bn_init"],
        bn_cap=cfg["bn_cap"], seed=cfg["seed"], transform=cfg["transform"],
        jitter_augment=cfg["jitter_augment"],
        loss=LossConfig(tau=cfg["tau"], symmetric=cfg["symmetric"],
                        normalize=cfg["normalize"],
                        exclude_positive=cfg["exclude_positive"]),
        encoder_widths=cfg["encoder_widths"], head_widths=cfg["head_widths"],
        seg_widths=cfg["seg_widths"], dropout_rate=cfg["dropout"])


def write_resolved_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.txt"), "w") as f:
        for k in sorted(cfg):
            v = cfg[k]
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            f.write(f"{k} = {v}\n")


def _add_common(sp):
    sp.add_argument("--config", help="key = value configuration file")
    sp.add_argument("--out", required=True, help="output directory")
    for key in _SCHEMA:
        sp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)


def build_parser():
    ap = argparse.ArgumentParser(
        prog="pointcl",
        description="Unsupervised contrastive representation learning for point clouds")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--classes", default="sphere,cube,cylinder,torus")
    g.add_argument("--per-class", type=int, default=50)
    g.add_argument("--points", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--with-parts", action="store_true")
    g.add_argument("--split", default="train")
    g.add_argument("--out", required=True)

    for name, helptext in [
        ("pretrain", "unsupervised contrastive pretraining"),
        ("probe", "frozen linear-probe evaluation"),
        ("finetune", "pretraining evaluation (supervised finetune)"),
        ("segment", "point-wise pretraining / segmentation evaluation"),
        ("ablate", "transformation ablation sweeps"),
        ("export-features", "dump frozen features for every sample"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        _add_common(sp)
        if name in ("pretrain", "segment"):
            sp.add_argument("--data", required=True, help="training dataset file")
        if name in ("probe", "finetune", "segment", "ablate"):
            sp.add_argument("--train-data", required=name in ("probe", "finetune"))
            sp.add_argument("--test-data", required=name in ("probe", "finetune", "ablate"))
        if name in ("probe", "finetune", "export-features"):
            sp.add_argument("--checkpoint", required=True)
        if name == "export-features":
            sp.add_argument("--data", required=True)
        if name == "ablate":
            sp.add_argument("--suite", choices=["table4", "table5"], default="table4")
            sp.add_argument("--data", required=True)
        if name == "finetune":
            sp.add_argument("--init-head", action="store_true")
    return ap


def _load(path):
    return load_dataset(path)


def cmd_gen_data(args):
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    for c in classes:
        if c not in SHAPE_CLASSES:
            raise ConfigError(f"unknown class {c!r}; choose from {sorted(SHAPE_CLASSES)}")
    spec = SyntheticSpec(classes=classes, per_class=args.per_class,
                         points_per_cloud=args.points, with_parts=args.with_parts,
                         split=args.split)
    ds = generate_synthetic_dataset(spec, np.random.default_rng(args.seed))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_dataset(ds, args.out)
    manifest = args.out + ".manifest.txt"
    with open(manifest, "w") as f:
        f.write(f"samples = {len(ds)}\nclasses = {','.join(classes)}\n"
                f"per_class = {args.per_class}\npoints = {args.points}\n"
                f"num_parts = {ds.num_parts}\nseed = {args.seed}\n")
    print(f"wrote {len(ds)} samples to {args.out}")


def cmd_pretrain(args, cfg, objective="cls"):
    ds = _load(args.data)
    tc = make_train_config(cfg)
    model, records = pretrain(ds, tc, objective=objective, out_dir=args.out)
    print(f"pretrained {len(records)} steps; final loss "
          f"{records[-1].loss:.4f}" if records else "no steps run")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint_final.pclm')}")


def cmd_probe(args, cfg):
    train_ds, test_ds = _load(args.train_data), _load(args.test_data)
    model, _ = models.load_checkpoint(args.checkpoint)
    rows = []
    sources = ["encoder", "head"] if cfg["features"] == "both" else [cfg["features"]]
    for source in sources:
        m, pred, gt = evaluation.linear_probe_eval(
            model, train_ds, test_ds, points_per_cloud=cfg["points"],
            source=source, probe_epochs=cfg["probe_epochs"], seed=cfg["seed"])
        rows.append(m.row())
        _dump_predictions(pred, gt, test_ds,
                          os.path.join(args.out, f"predictions_{source}.csv"))
    _emit_report(rows, args.out, "probe_metrics")


def cmd_finetune(args, cfg):
    train_ds, test_ds = _load(args.train_data), _load(args.test_data)
    tc = make_train_config(cfg)
    rows = []
    for init_head in ([False, True] if args.init_head else [False]):
        m = evaluation.pretrain_finetune_eval(
            args.checkpoint, train_ds, test_ds, tc,
            finetune_epochs=cfg["finetune_epochs"], init_head=init_head,
            seed=cfg["seed"])
        rows.append(m.row())
    _emit_report(rows, args.out, "finetune_metrics")


def cmd_segment(args, cfg):
    ds = _load(args.data)
    tc = make_train_config(cfg)
    model, records = pretrain(ds, tc, objective="seg", out_dir=args.out)
    if args.test_data:
        train_ds = _load(args.train_data) if args.train_data else ds
        test_ds = _load(args.test_data)
        m = evaluation.segmentation_eval(model, train_ds, test_ds,
                                         points_per_cloud=cfg["points"],
                                         probe_epochs=cfg["probe_epochs"],
                                         seed=cfg["seed"])
        _emit_report([m.row()], args.out, "segmentation_metrics")


def cmd_ablate(args, cfg):
    train_ds, test_ds = _load(args.data), _load(args.test_data)
    tc = make_train_config(cfg)
    suite = (evaluation.TABLE4_SUITE if args.suite == "table4"
             else evaluation.TABLE5_SUITE)
    rows = evaluation.ablate_transforms(train_ds, test_ds, tc, suite)
    _emit_report(rows, args.out, f"ablation_{args.suite}")


def cmd_export_features(args, cfg):
    ds = _load(args.data)
    model, _ = models.load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    sources = ["encoder", "head"] if cfg["features"] == "both" else [cfg["features"]]
    for source in sources:
        feats, labels = evaluation.extract_features(
            model, ds, cfg["points"], seed=cfg["seed"], source=source)
        out = os.path.join(args.out, f"features_{source}.csv")
        with open(out, "w") as f:
            f.write("id,label," + ",".join(f"f{i}" for i in range(feats.shape[1])) + "\n")
            for pc, y, row in zip(ds.samples, labels, feats):
                f.write(f"{pc.id},{y}," + ",".join(f"{v:.8g}" for v in row) + "\n")
        print(f"wrote {feats.shape[0]}x{feats.shape[1]} features to {out}")


def _dump_predictions(pred, gt, ds, path):
    with open(path, "w") as f:
        f.write("id,gt,pred\n")
        for pc, g, p in zip(ds.samples, gt, pred):
            f.write(f"{pc.id},{g},{p}\n")


def _emit_report(rows, out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    evaluation.write_report_csv(rows, os.path.join(out_dir, f"{name}.csv"))
    text = evaluation.format_report(rows)
    with open(os.path.join(out_dir, f"{name}.txt"), "w") as f:
        f.write(text)
    print(text, end="")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    os.environ.setdefault("POINTCL_THREADS", "1")  # worker-thread cap
    out_dir = getattr(args, "out", None)
    failed_marker = os.path.join(out_dir, ".failed") if out_dir else None
    try:
        if args.command == "gen-data":
            cmd_gen_data(args)
            return 0
        cfg = resolve_config(args)
        if out_dir:
            write_resolved_config(cfg, out_dir)
        if args.command == "pretrain":
            cmd_pretrain(args, cfg)
        elif args.command == "probe":
            cmd_probe(args, cfg)
        elif args.command == "finetune":
            cmd_finetune(args, cfg)
        elif args.command == "segment":
            cmd_segment(args, cfg)
        elif args.command == "ablate":
            cmd_ablate(args, cfg)
        elif args.command == "export-features":
            cmd_export_features(args, cfg)
        if failed_marker and os.path.exists(failed_marker):
            os.remove(failed_marker)
        return 0
    except (ConfigError, ValueError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        if failed_marker and os.path.isdir(out_dir):
            with open(failed_marker, "w") as f:
                f.write(f"{type(e).__name__}: {e}\n")
        traceback.print_exc()
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
