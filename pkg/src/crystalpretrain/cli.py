"""Command-line interface.

Commands: synth, stats, pretrain, finetune, evaluate, embed, augment-preview.
Configuration is a flat key=value file (``#`` comments) plus repeatable
``--set key=value`` overrides; every knob is addressable as a dotted key
(e.g. ``loss.kind``, ``augment.gndn_delta``). Unknown keys are rejected and
the whole configuration is validated before any work starts.

Exit codes: 0 success, 2 configuration/validation error, 3 data/IO error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, make_views
from .autodiff import NonFinite, ShapeMismatch
from .checkpoint import CheckpointError, load_checkpoint
from .datasets import (DatasetManifest, ManifestError, PlacementFailure,
                       SyntheticConfig, element_frequencies,
                       generate_synthetic_dataset, load_manifest, load_structures,
                       shannon_entropy, write_dataset)
from .graphs import GraphConfig, GraphError, build_graph
from .losses import LossConfig
from .model import ModelConfig, build_batch, encode, project
from .rng import RngStream
from .structures import StructureError
from .train import (EmptySplit, Metrics, TrainConfig, TrainError,
                    evaluate_checkpoint, finetune, load_graph_dataset, pretrain,
                    split_dataset)


class ConfigError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# dotted key -> (section, dataclass field, parser)
KEY_SPECS = {
    "graph.radius": ("graph", "radius", float),
    "graph.max_neighbors": ("graph", "max_neighbors", int),
    "graph.mu_min": ("graph", "mu_min", float),
    "graph.mu_max": ("graph", "mu_max", float),
    "graph.mu_step": ("graph", "mu_step", float),
    "graph.sigma": ("graph", "sigma", float),
    "graph.node_feature_mode": ("graph", "node_feature_mode", str),
    "graph.feature_table": ("graph", "feature_table", str),
    "augment.atom_mask_fraction": ("augment", "atom_mask_fraction", float),
    "augment.edge_mask_fraction": ("augment", "edge_mask_fraction", float),
    "augment.gndn_delta": ("augment", "gndn_delta", float),
    "augment.enable_atom_mask": ("augment", "enable_atom_mask", _parse_bool),
    "augment.enable_edge_mask": ("augment", "enable_edge_mask", _parse_bool),
    "augment.enable_gndn": ("augment", "enable_gndn", _parse_bool),
    "loss.kind": ("loss", "kind", str),
    "loss.temperature": ("loss", "temperature", float),
    "loss.lambda": ("loss", "lam", float),
    "loss.alpha": ("loss", "lam", float),  # alias of lambda
    "loss.bt_mode": ("loss", "bt_mode", str),
    "loss.sbt_scale": ("loss", "sbt_scale", str),
    "model.hidden_dim": ("model", "hidden_dim", int),
    "model.n_conv": ("model", "n_conv", int),
    "model.embed_dim": ("model", "embed_dim", int),
    "model.head_hidden": ("model", "head_hidden", int),
    "train.task": ("train", "task", str),
    "train.batch_size": ("train", "batch_size", int),
    "train.epochs": ("train", "epochs", int),
    "train.lr": ("train", "lr", float),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.adam_beta1": ("train", "adam_beta1", float),
    "train.adam_beta2": ("train", "adam_beta2", float),
    "train.adam_eps": ("train", "adam_eps", float),
    "train.decoupled_weight_decay": ("train", "decoupled_weight_decay", _parse_bool),
    "train.seed": ("train", "seed", int),
    "train.pretrain_eval_fraction": ("train", "pretrain_eval_fraction", float),
    "train.val_fraction": ("train", "val_fraction", float),
    "train.test_fraction": ("train", "test_fraction", float),
    "train.eval_every_steps": ("train", "eval_every_steps", int),
    "train.n_workers": ("train", "n_workers", int),
    "synth.n_crystals": ("synth", "n_crystals", int),
    "synth.n_classes": ("synth", "n_classes", int),
    "synth.max_atoms": ("synth", "max_atoms", int),
    "synth.target_noise": ("synth", "target_noise", float),
}


def read_config_file(path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    return pairs


class RunConfig:
    """Parsed, validated flat configuration."""

    def __init__(self, pairs: dict[str, str]):
        self.fields: dict[str, dict] = {s: {} for s in
                                        ("graph", "augment", "loss", "model",
                                         "train", "synth")}
        self.provided = set(pairs)
        for key, text in pairs.items():
            if key not in KEY_SPECS:
                raise ConfigError(f"unknown configuration key: {key}")
            section, attr, parser = KEY_SPECS[key]
            try:
                self.fields[section][attr] = parser(text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None

    def _build(self, section, cls):
        try:
            return cls(**self.fields[section])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid {section} configuration: {exc}") from None

    def graph_config(self) -> GraphConfig:
        return self._build("graph", GraphConfig)

    def augment_config(self) -> AugmentConfig:
        return self._build("augment", AugmentConfig)

    def loss_config(self) -> LossConfig:
        return self._build("loss", LossConfig)

    def model_config(self) -> ModelConfig:
        return self._build("model", ModelConfig)

    def synth_config(self, seed: int) -> SyntheticConfig:
        kwargs = dict(self.fields["synth"])
        kwargs.setdefault("n_crystals", 64)
        kwargs["seed"] = seed
        try:
            return SyntheticConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid synth configuration: {exc}") from None

    def train_config(self, phase: str) -> TrainConfig:
        cfg = TrainConfig(
            loss=self.loss_config(),
            augment=self.augment_config(),
            graph=self.graph_config(),
            model=self.model_config(),
            **self.fields["train"],
        )
        try:
            return cfg.resolved(phase)
        except ValueError as exc:
            raise ConfigError(f"invalid train configuration: {exc}") from None

    @property
    def seed(self) -> int:
        return self.fields["train"].get("seed", 0)


def _gather_run_config(args) -> RunConfig:
    pairs: dict[str, str] = {}
    if args.config:
        pairs.update(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    if args.seed is not None:
        pairs["train.seed"] = str(args.seed)
    return RunConfig(pairs)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_metrics(path, metrics: Metrics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        if metrics.mae is not None:
            fh.write(f"test_mae,{metrics.mae!r}\n")
        if metrics.accuracy is not None:
            fh.write(f"test_accuracy,{metrics.accuracy!r}\n")
        if metrics.val_metric is not None:
            fh.write(f"best_val_metric,{metrics.val_metric!r}\n")
        if metrics.best_epoch is not None:
            fh.write(f"best_epoch,{metrics.best_epoch}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, rc: RunConfig) -> int:
    cfg = rc.synth_config(rc.seed)
    out = _out_dir(args)
    structures, manifest = generate_synthetic_dataset(cfg)
    manifest_path = write_dataset(structures, manifest, out)
    print(f"wrote {len(structures)} structures and {manifest_path}")
    return 0


def cmd_stats(args, rc: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    structures = load_structures(manifest)
    counts = element_frequencies(structures.values())
    entropy = shannon_entropy(counts)
    out = _out_dir(args)
    stats_path = out / "stats.csv"
    with open(stats_path, "w", encoding="utf-8") as fh:
        fh.write("element,count\n")
        for sym, count in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
            fh.write(f"{sym},{count}\n")
    print(f"elements={len(counts)} shannon_entropy_nats={entropy!r}")
    print(f"wrote {stats_path}")
    return 0


def cmd_pretrain(args, rc: RunConfig) -> int:
    cfg = rc.train_config("pretrain")
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    dataset = load_graph_dataset(manifest, cfg.graph, n_workers=cfg.n_workers)
    result = pretrain(dataset, cfg, out_dir=out)
    eval_rows = [r for r in result.log.rows if r[4] == "eval_loss"]
    last_eval = eval_rows[-1][5] if eval_rows else "n/a"
    print(f"pretraining done: loss={cfg.loss.kind} epochs={cfg.epochs} "
          f"final_eval_loss={last_eval}")
    print(f"wrote {out / 'final.ckpt'}")
    return 0


def _checkpoint_for_finetune(args, rc: RunConfig):
    if args.no_pretrain and args.checkpoint:
        raise ConfigError("--checkpoint and --no-pretrain are mutually exclusive")
    if not args.no_pretrain and not args.checkpoint:
        raise ConfigError("finetune needs --checkpoint PATH or --no-pretrain")
    if args.no_pretrain:
        return None
    return load_checkpoint(args.checkpoint)


def _reconcile_with_checkpoint(rc: RunConfig, cfg: TrainConfig, ckpt) -> TrainConfig:
    """Adopt the checkpoint's model/graph settings unless explicitly overridden."""
    if ckpt is None:
        return cfg
    from dataclasses import replace

    if not any(k.startswith("model.") for k in rc.provided):
        cfg = replace(cfg, model=ckpt.model_config)
    elif asdict(cfg.model) != asdict(ckpt.model_config):
        raise ConfigError("model configuration conflicts with the checkpoint; "
                          "drop the model.* overrides or retrain")
    stored_graph = ckpt.metadata.get("graph_config")
    if stored_graph and not any(k.startswith("graph.") for k in rc.provided):
        cfg = replace(cfg, graph=GraphConfig(**stored_graph))
    if ckpt.metadata.get("edge_feature_width") not in (None, cfg.graph.n_centers):
        raise ShapeMismatch("checkpoint edge feature width",
                            ckpt.metadata["edge_feature_width"], cfg.graph.n_centers)
    return cfg


def cmd_finetune(args, rc: RunConfig) -> int:
    ckpt = _checkpoint_for_finetune(args, rc)
    cfg = _reconcile_with_checkpoint(rc, rc.train_config("finetune"), ckpt)
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    dataset = load_graph_dataset(manifest, cfg.graph, n_workers=cfg.n_workers)
    result = finetune(dataset, ckpt, cfg, out_dir=out)
    _write_metrics(out / "metrics.csv", result.metrics)
    m = result.metrics
    score = f"test_mae={m.mae!r}" if m.mae is not None else f"test_accuracy={m.accuracy!r}"
    print(f"fine-tuning done: task={cfg.task} {score} best_epoch={m.best_epoch}")
    print(f"wrote {out / 'best.ckpt'} and {out / 'metrics.csv'}")
    return 0


def cmd_evaluate(args, rc: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _reconcile_with_checkpoint(rc, rc.train_config("finetune"), ckpt)
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    dataset = load_graph_dataset(manifest, cfg.graph, n_workers=cfg.n_workers)
    metrics = evaluate_checkpoint(dataset, ckpt, cfg)
    _write_metrics(out / "metrics.csv", metrics)
    score = (f"test_mae={metrics.mae!r}" if metrics.mae is not None
             else f"test_accuracy={metrics.accuracy!r}")
    print(f"evaluation done: {score}")
    return 0


def cmd_embed(args, rc: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _reconcile_with_checkpoint(rc, rc.train_config("finetune"), ckpt)
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    dataset = load_graph_dataset(manifest, cfg.graph, n_workers=cfg.n_workers)
    splits = split_dataset(dataset.records, "finetune", cfg.seed,
                           val_fraction=cfg.val_fraction,
                           test_fraction=cfg.test_fraction)
    test_idx = splits["test"]
    params = ckpt.to_params()
    has_projection = any(n.startswith("projection.") for n in ckpt.tensors)

    rows = []
    for start in range(0, len(test_idx), cfg.batch_size):
        chunk = test_idx[start:start + cfg.batch_size]
        graphs = [dataset.graphs[int(i)] for i in chunk]  # un-augmented, always
        batch = build_batch(graphs, dataset.node_feature_mode, dataset.feature_table)
        pooled = encode(params, batch, cfg.model)
        emb = project(params, pooled) if has_projection else pooled
        for row_i, i in enumerate(chunk):
            rec = dataset.records[int(i)]
            label = "" if rec.surrogate_label is None else str(rec.surrogate_label)
            values = ",".join(repr(float(v)) for v in emb.values[row_i])
            rows.append(f"{rec.id},{label},{values}")

    width = ckpt.model_config.embed_dim if has_projection else ckpt.model_config.hidden_dim
    header = "id,label," + ",".join(f"e{k}" for k in range(width))
    embed_path = out / "embeddings.csv"
    with open(embed_path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")
    print(f"wrote {embed_path} ({len(rows)} rows, {width} dims)")
    return 0


def cmd_augment_preview(args, rc: RunConfig) -> int:
    cfg = rc.train_config("pretrain")
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    index = next((k for k, rec in enumerate(manifest.records) if rec.id == args.id), None)
    if index is None:
        raise ManifestError(f"unknown record id: {args.id!r}")
    structures = load_structures(DatasetManifest([manifest.records[index]]))
    graph = build_graph(structures[args.id], cfg.graph)
    streams = (RngStream(cfg.seed, "augment", 0, index, 0),
               RngStream(cfg.seed, "augment", 0, index, 1))
    views = make_views(graph, cfg.augment, streams, cfg.graph)

    preview_path = out / "preview.csv"
    with open(preview_path, "w", encoding="utf-8") as fh:
        fh.write("view,edge,i,j,d,d_noised,masked,feature_l2\n")
        for v, view in enumerate(views, start=1):
            for e in range(view.n_edges):
                l2 = float(np.sqrt((view.edge_features[e] ** 2).sum()))
                d, dn = float(graph.distances[e]), float(view.distances[e])
                fh.write(f"{v},{e},{view.src[e]},{view.dst[e]},"
                         f"{d!r},{dn!r},{int(view.edge_masked[e])},{l2!r}\n")
    print(f"wrote {preview_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crystalpretrain",
        description="Contrastive pretraining and fine-tuning for crystal "
                    "property prediction.")
    parser.add_argument("--config", help="flat key=value configuration file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic CIF dataset + manifest")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="element frequencies and Shannon entropy")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning")
    p.add_argument("manifest")
    p.add_argument("--checkpoint", help="pretrained checkpoint to start from")
    p.add_argument("--no-pretrain", action="store_true",
                   help="train from random initialization")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a fine-tuned checkpoint on the test split")
    p.add_argument("manifest")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("embed", help="export test-split embeddings as CSV")
    p.add_argument("manifest")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("augment-preview", help="dump a view pair for one record")
    p.add_argument("manifest")
    p.add_argument("--id", required=True)
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = _gather_run_config(args)
        return args.func(args, rc)
    except (ConfigError, ShapeMismatch) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NonFinite as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except (StructureError, ManifestError, GraphError, TrainError, CheckpointError,
            PlacementFailure, EmptySplit, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
