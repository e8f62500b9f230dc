"""Synthetic tasks, base-model pretraining and CSV datasets.

CSV layout: a header row, then one row per sample with float feature
columns followed by a single integer label column (named ``label`` by
default). Example::

    f0,f1,f2,label
    0.25,-1.5,3.0,2
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .errors import ConfigError, DataError
from .models import Model, build_model
from .optim import AdamW


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    seed: int | None = None
    num_classes: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.name}: {self.inputs.shape} inputs for {self.labels.shape[0]} labels")
        if not np.all(np.isfinite(self.inputs)):
            raise DataError(f"{self.name}: non-finite inputs")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.name, self.seed, self.num_classes)


def gen_blobs(num_classes: int, dims: int, per_class: int, spread: float, seed: int = 0,
              center_scale: float = 2.0) -> Dataset:
    """Isotropic Gaussian clusters around seeded centres, rows shuffled."""
    if min(num_classes, dims, per_class) < 1:
        raise ConfigError("num_classes, dims and per_class must be at least 1")
    if not spread > 0:
        raise ConfigError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(num_classes, dims))
    labels = np.repeat(np.arange(num_classes), per_class)
    inputs = centers[labels] + rng.normal(0.0, spread, size=(len(labels), dims))
    order = rng.permutation(len(labels))
    return Dataset(inputs[order], labels[order], f"blobs{num_classes}", seed, num_classes)


def gen_teacher_task(widths: list[int], activation: str, dims: int, n: int, seed: int = 0,
                     num_classes: int = 3, perturb: float = 0.0, perturb_seed: int | None = None,
                     input_seed: int | None = None, max_tries: int = 20):
    """Random inputs labelled by argmax of a random teacher network.

    ``perturb`` adds Gaussian noise of that size, relative to each layer's
    weight spread, to the teacher before labelling; the same ``seed`` with
    different ``perturb`` gives a related task. Draws are repeated with
    derived seeds until every class occurs at least once (possible only when
    ``n >= num_classes``).
    """
    if n < 1:
        raise ConfigError("n must be at least 1")
    for attempt in range(max_tries):
        sub = seed if attempt == 0 else seed + 7919 * attempt
        teacher = build_model({"kind": "mlp", "widths": widths, "activation": activation},
                              num_classes, dims, seed=sub)
        if perturb:
            rng = np.random.default_rng(perturb_seed if perturb_seed is not None else sub + 2)
            for layer in teacher.layers.values():
                w = layer.W0.data
                layer.W0.data = w + perturb * np.std(w) * rng.normal(size=w.shape)
        in_seed = sub + 1 if input_seed is None else input_seed + 7919 * attempt
        inputs = np.random.default_rng(in_seed).normal(size=(n, dims))
        labels = teacher.predict(inputs)
        if n < num_classes or len(np.unique(labels)) == num_classes:
            return Dataset(inputs, labels, "teacher", sub, num_classes), teacher
    raise DataError(f"teacher task stayed degenerate after {max_tries} draws")


# overflow surfaces as NumericalError from the finiteness checks instead
@np.errstate(over="ignore", invalid="ignore")
def pretrain_full(model: Model, data: Dataset, epochs: int = 30, lr: float = 1e-2,
                  batch_size: int = 64, seed: int = 0) -> Model:
    """Full-parameter training of every layer, then freeze again."""
    layers = list(model.layers.values())
    for layer in layers:
        layer.W0.requires_grad = True
    params = [layer.W0 for layer in layers]
    opt = AdamW(params)
    rng = np.random.default_rng(seed)
    try:
        for _ in range(epochs):
            order = rng.permutation(len(data))
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                graph = Graph()
                logits, _ = model.forward(data.inputs[idx], graph, use_adapters=False)
                loss = graph.softmax_cross_entropy(logits, data.labels[idx])
                opt.zero_grad()
                graph.backward(loss)
                opt.step(lr)
    finally:
        for layer in layers:
            layer.W0.requires_grad = False
            layer.W0.grad = None
    return model


@dataclass
class ScenarioSpec:
    """Pretrain task, fine-tune task and base architecture for one experiment.

    ``source`` is an optional related task; a vanilla adapter trained on it
    can serve as the Stage-1 reference (cross-task initialisation).
    """

    model: dict = field(default_factory=lambda: {"kind": "mlp", "widths": [32, 32], "activation": "relu"})
    pretrain: dict = field(default_factory=lambda: {"kind": "teacher", "n": 1024, "seed": 101})
    finetune: dict = field(default_factory=lambda: {"kind": "teacher", "n": 1024, "seed": 101,
                                                     "perturb": 0.6, "perturb_seed": 999,
                                                     "input_seed": 555})
    eval: dict | None = field(default_factory=lambda: {"kind": "teacher", "n": 512, "seed": 101,
                                                         "perturb": 0.6, "perturb_seed": 999,
                                                         "input_seed": 556})
    source: dict | None = field(default_factory=lambda: {"kind": "teacher", "n": 1024, "seed": 101,
                                                           "perturb": 0.3, "perturb_seed": 999,
                                                           "input_seed": 777})
    source_epochs: int = 3
    dims: int = 16
    num_classes: int = 3
    pretrain_epochs: int = 10
    pretrain_lr: float = 3e-3
    model_seed: int = 0
    placement: list[str] | None = None
    notes: str = ""

    def __post_init__(self):
        if self.source_epochs < 1:
            raise ConfigError("scenario.source_epochs must be at least 1")
        for which in ("pretrain", "finetune", "eval", "source"):
            task = getattr(self, which)
            if task is None:
                continue
            if not isinstance(task, dict):
                raise ConfigError(f"scenario.{which} must be a mapping")
            if "dims" in task and task["dims"] != self.dims:
                raise ConfigError(f"scenario.{which}.dims must equal scenario.dims ({self.dims})")


def make_task(task: dict, dims: int, num_classes: int) -> Dataset:
    kind = task.get("kind", "blobs")
    seed = int(task.get("seed", 0))
    if kind == "blobs":
        return gen_blobs(num_classes, dims, int(task.get("per_class", 200)),
                         float(task.get("spread", 1.5)), seed, float(task.get("center_scale", 2.0)))
    if kind == "teacher":
        data, _ = gen_teacher_task(list(task.get("widths", [32])), task.get("activation", "relu"),
                                   dims, int(task.get("n", 1024)), seed, num_classes,
                                   float(task.get("perturb", 0.0)), task.get("perturb_seed"),
                                   task.get("input_seed"))
        return data
    if kind == "csv":
        data = load_csv(task["path"])
        if data.dims != dims:
            raise ConfigError(f"{task['path']} has {data.dims} features, scenario expects {dims}")
        return data
    raise ConfigError(f"unknown task kind {kind!r}")


def eval_task(spec: ScenarioSpec, fine: Dataset) -> Dataset:
    """The held-out evaluation set, or the fine-tune set itself when none is configured."""
    if spec.eval is None:
        return fine
    data = make_task(spec.eval, spec.dims, spec.num_classes)
    data.name = "eval"
    return data


def build_scenario(spec: ScenarioSpec):
    """Return ``(base_model, pretrain_data, finetune_data)``; the base is pretrained and frozen."""
    pre = make_task(spec.pretrain, spec.dims, spec.num_classes)
    fine = make_task(spec.finetune, spec.dims, spec.num_classes)
    if pre.dims != fine.dims:
        raise ConfigError("pretrain and finetune tasks must share input dimensionality")
    if fine.num_classes > spec.num_classes:
        raise ConfigError(f"fine-tune task has {fine.num_classes} classes, model head has {spec.num_classes}")
    base = build_model(spec.model, spec.num_classes, spec.dims, seed=spec.model_seed)
    pretrain_full(base, pre, spec.pretrain_epochs, spec.pretrain_lr, seed=spec.model_seed)
    return base, pre, fine


# -- CSV --------------------------------------------------------------------

def write_csv(path, data: Dataset, feature_names: list[str] | None = None, label: str = "label") -> None:
    names = feature_names or [f"f{i}" for i in range(data.dims)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*names, label])
        for row, y in zip(data.inputs, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(y)])


def load_csv(path, schema: dict | None = None) -> Dataset:
    """Read a dataset; ``schema`` may name ``features``, ``label`` and ``num_classes``."""
    schema = schema or {}
    label_col = schema.get("label", "label")
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if label_col not in header:
            raise DataError(f"{path}: no label column {label_col!r}")
        features = schema.get("features") or [h for h in header if h != label_col]
        missing = [f for f in features if f not in header]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        fidx = [header.index(f) for f in features]
        lidx = header.index(label_col)
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                xs.append([float(row[i]) for i in fidx])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad feature value ({exc})") from None
            raw = row[lidx].strip()
            try:
                y = int(raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: unknown label {raw!r}") from None
            if y < 0 or ("num_classes" in schema and y >= schema["num_classes"]):
                raise DataError(f"{path}:{lineno}: unknown label {y}")
            ys.append(y)
    if not ys:
        raise DataError(f"{path}: no data rows")
    inputs = np.array(xs, dtype=np.float64)
    if not np.all(np.isfinite(inputs)):
        raise DataError(f"{path}: non-finite feature values")
    return Dataset(inputs, np.array(ys), path.stem, None, schema.get("num_classes"))
