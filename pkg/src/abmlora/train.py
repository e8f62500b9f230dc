"""Stage 2: supervised fine-tuning of the adapters with the base frozen."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .data import Dataset
from .errors import ConfigError, DataError, NumericalError
from .geometry import InfoLossReport, decompose, full_and_adapter_gradients
from .lora import save_adapters
from .optim import clip_grad_norm, make_optimizer

TRACE_COLUMNS = ["step", "lr", "train_loss", "eval_acc", "total", "unavoidable", "reducible",
                 "upper_bound"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 1
    batch_size: int = 32
    schedule: str = "cosine"
    warmup_ratio: float = 0.03
    max_grad_norm: float | None = None
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError("train.warmup_ratio must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be at least 1")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError("train.schedule must be constant or cosine")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError("train.optimizer must be sgd or adamw")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("train.max_steps must be at least 1")

    def total_steps(self, num_samples: int) -> int:
        per_epoch = math.ceil(num_samples / self.batch_size)
        total = per_epoch * self.epochs
        return min(total, self.max_steps) if self.max_steps else total


@dataclass
class ProbeSchedule:
    """Which steps get an information-loss report, and for which layers."""

    dense_steps: int = 20
    every: int = 10
    layers: list[str] | None = None
    projection: str = "orthogonal"

    def due(self, step: int) -> bool:
        return step < self.dense_steps or (self.every > 0 and step % self.every == 0)


@dataclass
class StepRecord:
    step: int
    lr: float
    train_loss: float
    eval_metric: float | None = None
    info: InfoLossReport | None = None


@dataclass
class TrainTrace:
    records: list[StepRecord] = field(default_factory=list)
    layer_reports: list[dict] = field(default_factory=list)

    def loss_at(self, step: int) -> float:
        return self.records[step].train_loss

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for r in self.records:
                info = r.info
                writer.writerow([
                    r.step, repr(float(r.lr)), repr(float(r.train_loss)),
                    "" if r.eval_metric is None else repr(float(r.eval_metric)),
                    *(("",) * 4 if info is None else
                      (repr(float(info.total_discrepancy)), repr(float(info.unavoidable)),
                       repr(float(info.reducible)), repr(float(info.upper_bound)))),
                ])


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0].keys()) != TRACE_COLUMNS:
        raise DataError(f"{path} is not a training trace")
    out = []
    for row in rows:
        out.append({k: (int(v) if k == "step" else (float(v) if v != "" else None))
                    for k, v in row.items()})
    return out


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to the peak, then cosine decay reaching 0 at the last step."""
    if step < 0:
        raise ConfigError("step must be nonnegative")
    peak = cfg.learning_rate
    warmup = int(math.ceil(cfg.warmup_ratio * total_steps))
    if step < warmup:
        return peak * step / warmup
    if cfg.schedule == "constant":
        return peak
    span = max(1, total_steps - 1 - warmup)
    progress = min(1.0, (step - warmup) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def evaluate(model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    return float(np.mean(model.predict(dataset.inputs) == dataset.labels))


def probe_layers(model, probe: ProbeSchedule) -> list[str]:
    if probe.layers:
        return list(probe.layers)
    return list(model.adapters())


def info_report(model, x, labels, layers: list[str], step: int,
                projection: str = "orthogonal") -> tuple[InfoLossReport, list[InfoLossReport]]:
    """Per-layer reports at the current factors and their sum over ``layers``."""
    per_layer = []
    for name in layers:
        ad = model.layer(name).adapter
        if ad is None:
            raise ConfigError(f"probe layer {name!r} has no adapter")
        g, gd = full_and_adapter_gradients(model, x, labels, name)
        per_layer.append(decompose(g, gd, ad.A.data, ad.B.data, step, projection))
    total = InfoLossReport(step, *(sum(getattr(r, f) for r in per_layer) for f in
                                   ("total_discrepancy", "unavoidable", "reducible", "upper_bound",
                                    "pythagorean_residual", "bound_margin")))
    return total, per_layer


# overflow surfaces as NumericalError from the finiteness checks instead
@np.errstate(over="ignore", invalid="ignore")
def fine_tune(model, dataset: Dataset, cfg: TrainConfig, probe: ProbeSchedule | None = None,
              eval_data: Dataset | None = None, eval_every: int = 0,
              checkpoint_every: int = 0, checkpoint_dir=None):
    """Train the attached adapters on ``dataset``; returns ``(adapters, TrainTrace)``.

    Losses and probe reports are taken on each mini-batch before its update.
    """
    if len(dataset) == 0:
        raise DataError("cannot fine-tune on an empty dataset")
    params = model.adapter_parameters()
    if not params:
        raise ConfigError("model has no adapters to train")
    opt = make_optimizer(cfg.optimizer, params, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    total = cfg.total_steps(len(dataset))
    layers = probe_layers(model, probe) if probe else []
    trace = TrainTrace()
    step = 0
    while step < total:
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            idx = order[start:start + cfg.batch_size]
            x, y = dataset.inputs[idx], dataset.labels[idx]
            lr = lr_at(step, cfg, total)
            info = None
            if probe is not None and probe.due(step):
                info, per_layer = info_report(model, x, y, layers, step, probe.projection)
                trace.layer_reports.extend(
                    {"layer": n, **r.as_row()} for n, r in zip(layers, per_layer))
            graph = Graph()
            logits, _ = model.forward(x, graph)
            loss = graph.softmax_cross_entropy(logits, y)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError("non-finite training loss", step)
            opt.zero_grad()
            graph.backward(loss)
            if cfg.max_grad_norm:
                clip_grad_norm(params, cfg.max_grad_norm)
            opt.step(lr)
            for p in params:
                if not np.all(np.isfinite(p.data)):
                    raise NumericalError("adapter diverged", step)
            acc = None
            if eval_data is not None and eval_every and (step + 1) % eval_every == 0:
                acc = evaluate(model, eval_data)
            trace.records.append(StepRecord(step, lr, value, acc, info))
            if checkpoint_every and checkpoint_dir and (step + 1) % checkpoint_every == 0:
                save_adapters(Path(checkpoint_dir) / f"adapter_step{step + 1}.ckpt", model.adapters())
            step += 1
    return model.adapters(), trace
