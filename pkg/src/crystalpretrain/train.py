"""Training loops: contrastive pretraining, supervised fine-tuning, Adam,
dataset splitting, metrics, and logging.

Runs are bitwise deterministic for a given (seed, config, dataset): shuffles
and augmentations draw from streams derived per (seed, purpose, epoch,
sample, view), so the worker count never changes results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, make_views
from .autodiff import Tape, Tensor, backward
from .checkpoint import Checkpoint, checkpoint_from_params, save_checkpoint
from .datasets import DatasetManifest, ManifestRecord, load_structures
from .graphs import FeatureTable, GraphConfig, build_graph, load_feature_table
from .losses import LossConfig, compute_loss
from .model import (ModelConfig, TASKS, build_batch, encode, encoder_param_names,
                    finetune_param_names, head_forward, init_params,
                    pretrain_param_names, project)
from .rng import RngStream

PHASES = ("pretrain", "finetune")


class TrainError(Exception):
    pass


class EmptySplit(TrainError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"split {name!r} is empty")


class MissingSurrogateLabel(TrainError):
    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"record {record_id!r} has no surrogate label")


class MissingTarget(TrainError):
    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"record {record_id!r} has no target")


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    phase: str = "pretrain"
    task: str = "regression"
    batch_size: int | None = None
    epochs: int | None = None
    lr: float | None = None
    weight_decay: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    decoupled_weight_decay: bool = False
    seed: int = 0
    pretrain_eval_fraction: float = 0.05
    val_fraction: float = 0.10
    test_fraction: float = 0.20
    eval_every_steps: int = 50
    n_workers: int = 1

    def resolved(self, phase: str | None = None) -> "TrainConfig":
        """Fill phase-dependent defaults and validate."""
        phase = phase or self.phase
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        batch_size = self.batch_size
        if batch_size is None:
            if phase == "finetune":
                batch_size = 128
            else:
                batch_size = 256 if self.loss.kind in ("nt-xent", "supcon") else 128
        epochs = self.epochs if self.epochs is not None else (15 if phase == "pretrain" else 200)
        lr = self.lr if self.lr is not None else (1e-5 if phase == "pretrain" else 1e-3)
        cfg = replace(self, phase=phase, batch_size=batch_size, epochs=epochs, lr=lr)
        cfg._validate()
        return cfg

    def _validate(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 < self.pretrain_eval_fraction < 1.0:
            raise ValueError("pretrain_eval_fraction must lie in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0 or not 0.0 < self.test_fraction < 1.0:
            raise ValueError("val/test fractions must lie in (0, 1)")
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ValueError("val_fraction + test_fraction must stay below 1")
        if self.eval_every_steps < 1:
            raise ValueError("eval_every_steps must be >= 1")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor], names) -> "AdamState":
        return cls(m={n: np.zeros_like(params[n].values) for n in names},
                   v={n: np.zeros_like(params[n].values) for n in names})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0,
              decoupled: bool = False) -> tuple[dict[str, Tensor], AdamState]:
    """One Adam update over the parameters tracked by the state, in place.

    By default the L2 term folds into the gradient (classic Adam); decoupled
    subtracts lr * weight_decay * theta directly instead.
    """
    state.t += 1
    correct1 = 1.0 - beta1 ** state.t
    correct2 = 1.0 - beta2 ** state.t
    for name in state.m:
        theta = params[name].values
        g = grads[name]
        if weight_decay and not decoupled:
            g = g + weight_decay * theta
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / correct1
        v_hat = state.v[name] / correct2
        if weight_decay and decoupled:
            theta -= lr * weight_decay * theta
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.isfinite(theta).all():
            raise ad.NonFinite(f"adam_step[{name}]")
    return params, state


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_dataset(manifest, phase: str, seed: int, *,
                  pretrain_eval_fraction: float = 0.05,
                  val_fraction: float = 0.10,
                  test_fraction: float = 0.20) -> dict[str, np.ndarray]:
    """Index sets per split: explicit split column wins, else a seeded shuffle.

    pretrain: {"train", "eval"} (explicit "val" rows become the eval set);
    finetune: {"train", "val", "test"}.
    """
    records = getattr(manifest, "records", manifest)
    if not records:
        raise EmptySplit("train")
    explicit = [rec.split for rec in records]
    if any(s is not None for s in explicit):
        if any(s is None for s in explicit):
            raise TrainError("split column must be fully present or fully absent")
        by_name = {name: np.array([i for i, s in enumerate(explicit) if s == name],
                                  dtype=np.int64)
                   for name in ("train", "val", "test")}
        if phase == "pretrain":
            out = {"train": by_name["train"], "eval": by_name["val"]}
        else:
            out = by_name
    else:
        order = RngStream(seed, "split").generator().permutation(len(records))
        n = len(records)
        if phase == "pretrain":
            n_eval = int(np.floor(pretrain_eval_fraction * n))
            out = {"eval": np.sort(order[:n_eval]), "train": np.sort(order[n_eval:])}
        else:
            n_test = int(np.floor(test_fraction * n))
            n_val = int(np.floor(val_fraction * n))
            out = {
                "test": np.sort(order[:n_test]),
                "val": np.sort(order[n_test:n_test + n_val]),
                "train": np.sort(order[n_test + n_val:]),
            }
    for name, idx in out.items():
        if len(idx) == 0:
            raise EmptySplit(name)
    return out


# ---------------------------------------------------------------------------
# dataset of prebuilt graphs
# ---------------------------------------------------------------------------

@dataclass
class GraphDataset:
    records: list[ManifestRecord]
    graphs: list
    feature_table: FeatureTable | None = None
    node_feature_mode: str = "learned-embedding"

    def __len__(self):
        return len(self.records)


def load_graph_dataset(manifest: DatasetManifest, graph_cfg: GraphConfig,
                       n_workers: int = 1) -> GraphDataset:
    """Parse all structures and build each graph once (augmentation happens
    per epoch on the cached graphs)."""
    structures = load_structures(manifest)
    table = None
    if graph_cfg.node_feature_mode == "external-table":
        if not graph_cfg.feature_table:
            raise TrainError("external-table mode requires graph.feature_table")
        table = load_feature_table(graph_cfg.feature_table)
    ordered = [structures[rec.id] for rec in manifest.records]

    def build(structure):
        return build_graph(structure, graph_cfg, table)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            graphs = list(pool.map(build, ordered))
    else:
        graphs = [build(s) for s in ordered]
    return GraphDataset(records=list(manifest.records), graphs=graphs,
                        feature_table=table,
                        node_feature_mode=graph_cfg.node_feature_mode)


# ---------------------------------------------------------------------------
# logging and metrics
# ---------------------------------------------------------------------------

class TrainingLog:
    """Accumulates rows of the training log CSV."""

    COLUMNS = ("step", "epoch", "phase", "loss", "metric_name", "metric_value")

    def __init__(self):
        self.rows: list[tuple] = []

    def log_loss(self, step: int, epoch: int, phase: str, loss: float):
        self.rows.append((step, epoch, phase, repr(float(loss)), "", ""))

    def log_metric(self, step: int, epoch: int, phase: str, name: str, value: float):
        self.rows.append((step, epoch, phase, "", name, repr(float(value))))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(str(c) for c in row) + "\n")


def mean_absolute_error(preds, targets) -> float:
    """MAE in the targets' native units."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return float(np.abs(preds - targets).mean())


@dataclass
class Metrics:
    mae: float | None = None
    accuracy: float | None = None
    val_metric: float | None = None
    best_epoch: int | None = None

    def __post_init__(self):
        if self.mae is not None and self.mae < 0:
            raise ValueError("mae must be >= 0")
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {n: Tensor(t.values.copy(), requires_grad=True) for n, t in params.items()}


def _view_pairs(dataset: GraphDataset, indices, cfg: TrainConfig, epoch: int,
                tag: str):
    def one(i):
        streams = (RngStream(cfg.seed, tag, epoch, int(i), 0),
                   RngStream(cfg.seed, tag, epoch, int(i), 1))
        return make_views(dataset.graphs[i], cfg.augment, streams, cfg.graph)

    if cfg.n_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_workers) as pool:
            return list(pool.map(one, [int(i) for i in indices]))
    return [one(int(i)) for i in indices]


def _embed_views(params, dataset, pairs, cfg: TrainConfig) -> Tensor:
    interleaved = [view for pair in pairs for view in pair]
    batch = build_batch(interleaved, dataset.node_feature_mode, dataset.feature_table)
    return project(params, encode(params, batch, cfg.model))


def _batch_labels(dataset: GraphDataset, indices, required: bool):
    labels = []
    for i in indices:
        rec = dataset.records[int(i)]
        if rec.surrogate_label is None:
            if required:
                raise MissingSurrogateLabel(rec.id)
            return None
        labels.append(rec.surrogate_label)
    return np.array(labels, dtype=np.int64)


def _grads_by_name(params, names, grads) -> dict[str, np.ndarray]:
    return {n: grads.get(params[n], np.zeros_like(params[n].values)) for n in names}


def _pretrain_metadata(cfg: TrainConfig, dataset: GraphDataset, epoch: int,
                       label_name: str) -> dict:
    table_width = dataset.feature_table.width if dataset.feature_table else None
    return {
        "phase": cfg.phase,
        "epoch": epoch,
        "loss_kind": cfg.loss.kind,
        "surrogate_label_name": label_name,
        "seed": cfg.seed,
        "rng_cursor": {"seed": cfg.seed, "next_epoch": epoch},
        "graph_config": asdict(cfg.graph),
        "edge_feature_width": cfg.graph.n_centers,
        "external_feature_width": table_width,
    }


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    params: dict[str, Tensor]
    checkpoint: Checkpoint
    log: TrainingLog


def pretrain(dataset: GraphDataset, cfg: TrainConfig, out_dir=None,
             label_name: str = "surrogate_label") -> PretrainResult:
    """Contrastive pretraining over two augmented views per crystal.

    Both views pass through the shared-weight encoder and projection head;
    the configured loss drives Adam. The held-out eval split is scored once
    per epoch with the same loss.
    """
    cfg = cfg.resolved("pretrain")
    splits = split_dataset(dataset.records, "pretrain", cfg.seed,
                           pretrain_eval_fraction=cfg.pretrain_eval_fraction)
    train_idx, eval_idx = splits["train"], splits["eval"]
    if cfg.loss.needs_labels:
        for i in np.concatenate([train_idx, eval_idx]):
            if dataset.records[int(i)].surrogate_label is None:
                raise MissingSurrogateLabel(dataset.records[int(i)].id)

    table_width = dataset.feature_table.width if dataset.feature_table else None
    params = init_params(cfg.model, cfg.seed,
                         edge_feature_width=cfg.graph.n_centers,
                         external_feature_width=table_width)
    opt_names = pretrain_param_names(params)
    state = AdamState.for_params(params, opt_names)
    log = TrainingLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(cfg.epochs):
        gen = RngStream(cfg.seed, "shuffle", epoch).generator()
        order = train_idx[gen.permutation(len(train_idx))]
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            if len(batch_idx) < 2:
                continue
            pairs = _view_pairs(dataset, batch_idx, cfg, epoch, tag="augment")
            labels = _batch_labels(dataset, batch_idx, cfg.loss.needs_labels)
            with Tape() as tape:
                z = _embed_views(params, dataset, pairs, cfg)
                loss = compute_loss(cfg.loss, z, labels)
                grads = backward(tape, loss)
            adam_step(params, _grads_by_name(params, opt_names, grads), state,
                      lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                      eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                      decoupled=cfg.decoupled_weight_decay)
            step += 1
            if step % cfg.eval_every_steps == 0:
                log.log_loss(step, epoch, "pretrain", loss.item())
        eval_pairs = _view_pairs(dataset, eval_idx, cfg, epoch, tag="eval-augment")
        eval_labels = _batch_labels(dataset, eval_idx, cfg.loss.needs_labels)
        z_eval = _embed_views(params, dataset, eval_pairs, cfg)
        eval_loss = compute_loss(cfg.loss, z_eval, eval_labels).item()
        log.log_metric(step, epoch, "pretrain", "eval_loss", eval_loss)
        if out_dir is not None:
            ckpt = checkpoint_from_params(
                params, cfg.model, _pretrain_metadata(cfg, dataset, epoch + 1, label_name))
            save_checkpoint(out_dir / f"epoch-{epoch + 1:04d}.ckpt", ckpt)

    final = checkpoint_from_params(
        params, cfg.model, _pretrain_metadata(cfg, dataset, cfg.epochs, label_name))
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", final)
        log.save(out_dir / "log.csv")
    return PretrainResult(params=params, checkpoint=final, log=log)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    params: dict[str, Tensor]
    metrics: Metrics
    checkpoint: Checkpoint
    log: TrainingLog


def _targets(dataset: GraphDataset, indices) -> np.ndarray:
    out = []
    for i in indices:
        rec = dataset.records[int(i)]
        if rec.target is None:
            raise MissingTarget(rec.id)
        out.append(rec.target)
    return np.array(out, dtype=np.float64)


def _predictions(params, dataset: GraphDataset, indices, cfg: TrainConfig) -> np.ndarray:
    preds = []
    for start in range(0, len(indices), cfg.batch_size):
        chunk = indices[start:start + cfg.batch_size]
        graphs = [dataset.graphs[int(i)] for i in chunk]
        batch = build_batch(graphs, dataset.node_feature_mode, dataset.feature_table)
        out = head_forward(params, encode(params, batch, cfg.model), cfg.task)
        preds.append(out.values[:, 0])
    return np.concatenate(preds)


def _load_encoder(params: dict[str, Tensor], ckpt: Checkpoint):
    for name in encoder_param_names(params):
        if name not in ckpt.tensors:
            raise ad.ShapeMismatch(f"checkpoint missing {name}", params[name].shape)
        stored = ckpt.tensors[name].astype(np.float64)
        if stored.shape != params[name].shape:
            raise ad.ShapeMismatch(f"checkpoint[{name}]", stored.shape,
                                   params[name].shape)
        params[name].values = stored


def finetune(dataset: GraphDataset, ckpt: Checkpoint | None, cfg: TrainConfig,
             out_dir=None) -> FinetuneResult:
    """Supervised fine-tuning on targets, from a pretrained encoder or scratch.

    The projection head is discarded; a fresh two-layer head is trained along
    with the whole encoder. Regression targets are standardized by train-split
    statistics and predictions mapped back to original units for metrics. The
    parameters with the best validation metric are retained and scored on the
    test split.
    """
    cfg = cfg.resolved("finetune")
    splits = split_dataset(dataset.records, "finetune", cfg.seed,
                           val_fraction=cfg.val_fraction,
                           test_fraction=cfg.test_fraction)
    train_idx, val_idx, test_idx = splits["train"], splits["val"], splits["test"]
    train_targets = _targets(dataset, train_idx)
    val_targets = _targets(dataset, val_idx)
    test_targets = _targets(dataset, test_idx)
    classification = cfg.task == "binary-classification"
    if classification:
        for arr in (train_targets, val_targets, test_targets):
            if not np.isin(arr, (0.0, 1.0)).all():
                raise TrainError("binary-classification targets must be 0 or 1")
        t_mean, t_std = 0.0, 1.0
    else:
        t_mean = float(train_targets.mean())
        t_std = float(max(train_targets.std(), 1e-12))

    table_width = dataset.feature_table.width if dataset.feature_table else None
    params = init_params(cfg.model, cfg.seed,
                         edge_feature_width=cfg.graph.n_centers,
                         external_feature_width=table_width)
    if ckpt is not None:
        _load_encoder(params, ckpt)
    opt_names = finetune_param_names(params)
    state = AdamState.for_params(params, opt_names)
    log = TrainingLog()

    target_of = {int(i): t for i, t in zip(train_idx, train_targets)}

    def val_metric(p) -> float:
        preds = _predictions(p, dataset, val_idx, cfg)
        if classification:
            return float((( _sigmoid_np(preds) > 0.5) == (val_targets > 0.5)).mean())
        return mean_absolute_error(preds * t_std + t_mean, val_targets)

    best_params = clone_params(params)
    best_epoch = 0
    best_val = val_metric(params)
    log.log_metric(0, 0, "finetune",
                   "val_accuracy" if classification else "val_mae", best_val)

    step = 0
    for epoch in range(cfg.epochs):
        gen = RngStream(cfg.seed, "shuffle", epoch).generator()
        order = train_idx[gen.permutation(len(train_idx))]
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            graphs = [dataset.graphs[int(i)] for i in batch_idx]
            raw = np.array([target_of[int(i)] for i in batch_idx])
            with Tape() as tape:
                batch = build_batch(graphs, dataset.node_feature_mode,
                                    dataset.feature_table)
                out = head_forward(params, encode(params, batch, cfg.model), cfg.task)
                if classification:
                    y = Tensor(raw[:, None])
                    loss = ad.mean(ad.sub(ad.softplus(out), ad.mul(y, out)))
                else:
                    t = Tensor(((raw - t_mean) / t_std)[:, None])
                    loss = ad.mean(ad.power(ad.sub(out, t), 2))
                grads = backward(tape, loss)
            adam_step(params, _grads_by_name(params, opt_names, grads), state,
                      lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                      eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                      decoupled=cfg.decoupled_weight_decay)
            step += 1
            if step % cfg.eval_every_steps == 0:
                log.log_loss(step, epoch, "finetune", loss.item())
        current = val_metric(params)
        log.log_metric(step, epoch, "finetune",
                       "val_accuracy" if classification else "val_mae", current)
        better = current > best_val if classification else current < best_val
        if better:
            best_val = current
            best_epoch = epoch + 1
            best_params = clone_params(params)

    test_preds = _predictions(best_params, dataset, test_idx, cfg)
    if classification:
        accuracy = float(((_sigmoid_np(test_preds) > 0.5) == (test_targets > 0.5)).mean())
        metrics = Metrics(accuracy=accuracy, val_metric=best_val, best_epoch=best_epoch)
        log.log_metric(step, cfg.epochs, "finetune", "test_accuracy", accuracy)
    else:
        mae = mean_absolute_error(test_preds * t_std + t_mean, test_targets)
        metrics = Metrics(mae=mae, val_metric=best_val, best_epoch=best_epoch)
        log.log_metric(step, cfg.epochs, "finetune", "test_mae", mae)

    metadata = {
        "phase": "finetune",
        "epoch": best_epoch,
        "loss_kind": cfg.loss.kind,
        "surrogate_label_name": "surrogate_label",
        "seed": cfg.seed,
        "rng_cursor": {"seed": cfg.seed, "next_epoch": cfg.epochs},
        "graph_config": asdict(cfg.graph),
        "edge_feature_width": cfg.graph.n_centers,
        "external_feature_width": table_width,
        "task": cfg.task,
        "target_mean": t_mean,
        "target_std": t_std,
    }
    final = checkpoint_from_params(best_params, cfg.model, metadata)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "best.ckpt", final)
        log.save(out_dir / "log.csv")
    return FinetuneResult(params=best_params, metrics=metrics, checkpoint=final,
                          log=log)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def evaluate_checkpoint(dataset: GraphDataset, ckpt: Checkpoint,
                        cfg: TrainConfig) -> Metrics:
    """Score a fine-tuned checkpoint on the test split."""
    cfg = cfg.resolved("finetune")
    task = ckpt.metadata.get("task", cfg.task)
    cfg = replace(cfg, task=task)
    splits = split_dataset(dataset.records, "finetune", cfg.seed,
                           val_fraction=cfg.val_fraction,
                           test_fraction=cfg.test_fraction)
    test_idx = splits["test"]
    test_targets = _targets(dataset, test_idx)
    params = ckpt.to_params()
    preds = _predictions(params, dataset, test_idx, cfg)
    if task == "binary-classification":
        accuracy = float(((_sigmoid_np(preds) > 0.5) == (test_targets > 0.5)).mean())
        return Metrics(accuracy=accuracy)
    t_mean = ckpt.metadata.get("target_mean", 0.0)
    t_std = ckpt.metadata.get("target_std", 1.0)
    mae = mean_absolute_error(preds * t_std + t_mean, test_targets)
    return Metrics(mae=mae)
