"""Seeded mini-batch training, evaluation, and run logging.

The step log keeps wall-clock time in memory for inspection, but the
persisted CSV holds only deterministic columns (step, epoch, losses) so
two runs from one seed write byte-identical files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ImagePair
from .losses import total_loss
from .metrics import ConfusionCounts, MetricReport, binarize, confusion, metrics_from_confusion
from .model import ChangeMaps
from .nn import component_rng, save_checkpoint, save_config_block
from .optim import Adam
from .tensor import ConfigError, Tensor, no_grad


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    epochs: int = 20
    loss_mode: str = "multi_ce"
    focal_gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    per_map: dict[str, float]
    wall_time: float


@dataclass
class EpochRecord:
    epoch: int
    report: MetricReport


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def write_step_csv(self, path):
        names = list(self.steps[0].per_map) if self.steps else []
        with open(path, "w") as fh:
            fh.write("step,epoch,loss," + ",".join(f"loss_{n}" for n in names) + "\n")
            for rec in self.steps:
                values = ",".join(f"{rec.per_map[n]:.6f}" for n in names)
                fh.write(f"{rec.step},{rec.epoch},{rec.loss:.6f},{values}\n")

    def write_epoch_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,precision,recall,f1,oa,iou\n")
            for rec in self.epochs:
                r = rec.report
                fh.write(
                    f"{rec.epoch},{r.precision:.6f},{r.recall:.6f},"
                    f"{r.f1:.6f},{r.oa:.6f},{r.iou:.6f}\n"
                )


def _batch_tensors(pairs: list[ImagePair], dtype):
    x = Tensor(np.stack([p.x for p in pairs]).astype(dtype))
    y = Tensor(np.stack([p.y for p in pairs]).astype(dtype))
    gt = np.stack([p.gt for p in pairs])
    return x, y, gt


def _final_logits(output):
    return output.final_map if isinstance(output, ChangeMaps) else output


def evaluate(model, pairs: list[ImagePair], batch_size: int = 4):
    """Dataset-level metrics from pooled confusion counts."""
    model.eval()
    counts = ConfusionCounts()
    dtype = model.parameters()[0].data.dtype
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            x, y, gt = _batch_tensors(chunk, dtype)
            pred = binarize(_final_logits(model(x, y)))
            counts = counts + confusion(pred, gt)
    model.train()
    return metrics_from_confusion(counts), counts


def train_loop(
    model,
    train_pairs: list[ImagePair],
    cfg: TrainConfig,
    val_pairs: list[ImagePair] | None = None,
    out_dir=None,
) -> TrainLog:
    """Shuffled mini-batch Adam training with per-epoch eval/checkpoints."""
    if not train_pairs:
        raise ConfigError("training set is empty")
    if cfg.loss_mode != "single_ce" and model.kind == "basic":
        raise ConfigError(
            "the basic detector has no intermediate maps; use single_ce"
        )
    dtype = model.parameters()[0].data.dtype
    optimizer = Adam(
        model.trainable_parameters(), cfg.lr, cfg.beta1, cfg.beta2
    )
    order_rng = component_rng(cfg.seed, "batch-order")
    log = TrainLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    model.train()
    step = 0
    start_time = time.perf_counter()
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(train_pairs))
        for lo in range(0, len(perm), cfg.batch_size):
            batch = [train_pairs[i] for i in perm[lo : lo + cfg.batch_size]]
            x, y, gt = _batch_tensors(batch, dtype)
            output = model(x, y)
            loss, per_map = total_loss(output, gt, cfg.loss_mode, cfg.focal_gamma)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            model.trained_steps += 1
            log.steps.append(
                StepRecord(
                    step=step,
                    epoch=epoch,
                    loss=loss.item(),
                    per_map=per_map,
                    wall_time=time.perf_counter() - start_time,
                )
            )
        if val_pairs:
            report, _ = evaluate(model, val_pairs, cfg.batch_size)
            log.epochs.append(EpochRecord(epoch=epoch, report=report))
        if out_dir is not None:
            save_model(out_dir / f"epoch_{epoch:03d}.ckpt", model)

    if out_dir is not None:
        save_model(out_dir / "model_final.ckpt", model)
        log.write_step_csv(out_dir / "train_log.csv")
        log.write_epoch_csv(out_dir / "eval_log.csv")
    return log


def save_model(path, model):
    """Checkpoint plus the plain-text config sidecar describing the model."""
    path = Path(path)
    save_checkpoint(path, model.state_arrays())
    save_config_block(path.with_name(path.name + ".cfg"), model.config_block())


def load_model(path, dtype=np.float32):
    from .model import build_from_config
    from .nn import load_checkpoint, load_config_block

    path = Path(path)
    block = load_config_block(path.with_name(path.name + ".cfg"))
    model = build_from_config(block, dtype=dtype)
    model.load_state_arrays(load_checkpoint(path))
    return model
