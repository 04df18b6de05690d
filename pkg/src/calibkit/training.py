"""Training loop, hyperparameter grid runs and convergence logging.

Each optimization step extracts features once, runs the stochastic head
passes, feeds the predictive mean confidence to the task loss and the
alignment term, and backpropagates the composed total. With beta = 0 the
run reduces to plain task-loss training with a single dropout pass.

The best checkpoint is the epoch with the highest validation accuracy
(ties break toward the earlier epoch). The train log is line-delimited
JSON, one record per epoch, and is byte-reproducible for a fixed config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from calibkit import data as data_io
from calibkit import mc_dropout, models
from calibkit.losses import TaskLossSpec, alignment_loss, compose_total
from calibkit.metrics import PredictionBatch, compute_ece, compute_sce


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss surfaces; carries a diagnostic record."""

    def __init__(self, record):
        super().__init__(f"non-finite loss at {record}")
        self.record = record


@dataclass
class RunConfig:
    """Every knob of a training/evaluation run; JSON-serializable."""

    dataset: str = "blobs-synthetic"
    dataset_params: dict = field(default_factory=dict)
    dataset_root: str | None = None
    split_fractions: tuple = (0.7, 0.15, 0.15)
    arch: str = "mlp-small"
    task_loss: str = "ce"
    beta: float = 0.0
    beta_grid: tuple = (1, 5, 10, 15, 20, 25)
    dropout_rate: float = 0.3
    dropout_grid: tuple = (0.2, 0.3, 0.5)
    n_passes: int = 10
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    milestones: tuple = ()
    decay_factors: tuple = ()
    seed: int = 0
    eval_bins: int = 15
    out_dir: str = "runs"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not self.beta_grid or not self.dropout_grid:
            raise ValueError("grids must be non-empty")
        if len(self.milestones) != len(self.decay_factors):
            raise ValueError("milestones and decay_factors must pair up")
        TaskLossSpec.parse(self.task_loss)  # validate early

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("split_fractions", "beta_grid", "dropout_grid", "milestones", "decay_factors"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        d = dict(d)
        for key in ("split_fractions", "beta_grid", "dropout_grid", "milestones", "decay_factors"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class TrainLog:
    """One record per completed epoch."""

    records: list = field(default_factory=list)

    def append(self, **record):
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    log.records.append(json.loads(line))
        return log


def _lr_at(cfg: RunConfig, epoch: int) -> float:
    lr = cfg.lr
    for milestone, factor in zip(cfg.milestones, cfg.decay_factors):
        if epoch >= milestone:
            lr = cfg.lr * factor
    return lr


def _deterministic_batch(model, x, y) -> PredictionBatch:
    with torch.no_grad():
        logits = model.forward_deterministic(torch.from_numpy(x)).double().numpy()
    return PredictionBatch.from_logits(logits, y)


@dataclass
class TrainResult:
    model: models.CalibratableModel
    log: TrainLog
    best_epoch: int
    best_val_accuracy: float
    config: RunConfig


def train(cfg: RunConfig, split: data_io.DatasetSplit | None = None) -> TrainResult:
    """Train one run; deterministic for a fixed config."""
    if split is None:
        split = data_io.load_dataset(cfg.dataset, cfg.dataset_root, cfg.seed,
                                     cfg.split_fractions, cfg.dataset_params)
    input_shape = split.x_train.shape[1:]
    model = models.build(cfg.arch, split.num_classes, cfg.dropout_rate, cfg.seed,
                         input_shape)
    task = TaskLossSpec.parse(cfg.task_loss)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    mask_gen = torch.Generator().manual_seed(cfg.seed + 1)
    shuffle_rng = np.random.default_rng(cfg.seed + 2)

    n_train = len(split.x_train)
    x_train = torch.from_numpy(split.x_train)
    y_train = torch.from_numpy(split.y_train)

    log = TrainLog()
    best_state = None
    best_acc = -1.0
    best_epoch = -1

    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = shuffle_rng.permutation(n_train)
        task_sum = aux_sum = total_sum = 0.0
        n_batches = 0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            opt.zero_grad()
            if cfg.beta > 0:
                feats = model.features(xb)
                masks = mc_dropout.draw_masks(feats.shape, cfg.dropout_rate,
                                              cfg.n_passes, mask_gen)
                est = mc_dropout.estimate(
                    feats, model.classify,
                    mc_dropout.McConfig(cfg.n_passes, cfg.dropout_rate, cfg.seed),
                    masks=masks,
                )
                loss = compose_total(task, est, yb, cfg.beta)
                total = loss.total
                task_term, aux_term = loss.task_term, loss.aux_term
            else:
                logits = model.stochastic_forward(xb, generator=mask_gen)
                probs = torch.softmax(logits, dim=-1)
                total = task.evaluate(probs, yb)
                task_term, aux_term = float(total.detach()), 0.0
            if not torch.isfinite(total):
                record = {"epoch": epoch, "batch": n_batches, "loss": float(total)}
                log.append(event="abort", **record)
                raise TrainingAborted(record)
            total.backward()
            opt.step()
            task_sum += task_term
            aux_sum += aux_term
            total_sum += float(total.detach())
            n_batches += 1

        val_batch = _deterministic_batch(model, split.x_val, split.y_val)
        val_acc = val_batch.accuracy
        log.append(
            epoch=epoch,
            lr=lr,
            train_total=total_sum / n_batches,
            train_task=task_sum / n_batches,
            train_aux=aux_sum / n_batches,
            beta=cfg.beta,
            val_accuracy=val_acc,
            val_ece=compute_ece(val_batch, cfg.eval_bins),
            val_sce=compute_sce(val_batch, cfg.eval_bins),
        )
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    model.load_state_dict(best_state)
    return TrainResult(model, log, best_epoch, best_acc, cfg)


def run_and_persist(cfg: RunConfig, split=None) -> str:
    """Train and write checkpoint + log + config under the run directory."""
    run_dir = os.path.join(cfg.out_dir, f"run-{cfg.config_hash()}")
    os.makedirs(run_dir, exist_ok=True)
    result = train(cfg, split)
    models.save_checkpoint(
        result.model, os.path.join(run_dir, "checkpoint.pt"),
        extra_meta={
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "best_epoch": result.best_epoch,
        },
    )
    result.log.save(os.path.join(run_dir, "trainlog.jsonl"))
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    return run_dir


@dataclass
class GridCell:
    beta: float
    dropout_rate: float
    val_accuracy: float | None
    failed: bool = False
    log: TrainLog | None = None


def grid_search(cfg: RunConfig, split=None):
    """Train one run per (beta, p) cell; select by validation accuracy.

    Ties break toward smaller beta, then smaller p. A failed cell is
    recorded and the search continues.
    """
    if split is None:
        split = data_io.load_dataset(cfg.dataset, cfg.dataset_root, cfg.seed,
                                     cfg.split_fractions, cfg.dataset_params)
    cells = []
    best = None
    best_result = None
    for beta in cfg.beta_grid:
        for p in cfg.dropout_grid:
            cell_cfg = dataclasses.replace(cfg, beta=float(beta), dropout_rate=float(p))
            try:
                result = train(cell_cfg, split)
            except TrainingAborted:
                cells.append(GridCell(beta, p, None, failed=True))
                continue
            cell = GridCell(beta, p, result.best_val_accuracy, log=result.log)
            cells.append(cell)
            if best is None or cell.val_accuracy > best.val_accuracy:
                best, best_result = cell, result
    if best is None:
        raise TrainingAborted({"event": "all grid cells failed"})
    return best, best_result, cells
