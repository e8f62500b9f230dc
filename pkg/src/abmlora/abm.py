"""Stage 1: activation boundary matching.

The adapter is trained, without labels, so that the signs of the adapted
model's pre-activations agree with those of a reference (the frozen base
model, or the base plus a previously trained adapter) by at least a margin.
The objective is a layer-weighted squared hinge averaged over the batch.

Matching signs removes the mask term of the gradient discrepancy exactly
only for ReLU, whose derivative is the mask itself. GELU and SiLU layers
are aligned the same way, but there it is a heuristic.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, Tensor2
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .lora import load_adapters
from .optim import make_optimizer

WEIGHTINGS = ("uniform", "sequential", "quadratic")
BATCH_POLICIES = ("fixed", "cycle")
LAYER_PRESETS = ("all", "first_half", "last_half")
SCOPES = ("all", "selected")
SOURCES = ("pretrained", "finetuned")


@dataclass
class ActivationCapture:
    layers: dict[str, np.ndarray]
    source: str = "finetuned"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"unknown capture source {self.source!r}")


@dataclass
class MaskSnapshot:
    layers: dict[str, np.ndarray]


@dataclass
class AbmConfig:
    margin: float = 0.5
    steps: int = 100
    step_size: float = 3e-4
    layer_selection: list[str] | str = "all"
    weighting: str = "sequential"
    batch_policy: str = "cycle"
    batch_size: int = 64
    optimizer: str = "gd"
    scope: str = "all"

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError("abm.margin must be positive")
        if self.steps < 1:
            raise ConfigError("abm.steps must be at least 1")
        if not self.step_size > 0:
            raise ConfigError("abm.step_size must be positive")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"abm.weighting must be one of {WEIGHTINGS}")
        if self.batch_policy not in BATCH_POLICIES:
            raise ConfigError(f"abm.batch_policy must be one of {BATCH_POLICIES}")
        if self.batch_size < 1:
            raise ConfigError("abm.batch_size must be at least 1")
        if self.optimizer not in ("gd", "adamw"):
            raise ConfigError("abm.optimizer must be gd or adamw")
        if not self.layer_selection:
            raise ConfigError("abm.layer_selection must be nonempty")
        if self.scope not in SCOPES:
            raise ConfigError(f"abm.scope must be one of {SCOPES}")


def resolve_layers(model, selection) -> list[str]:
    """Expand a preset name or check an explicit list against the matchable layers."""
    matchable = model.matchable_layers
    if isinstance(selection, str):
        if selection not in LAYER_PRESETS:
            raise ConfigError(f"unknown layer preset {selection!r}; expected one of {LAYER_PRESETS}")
        half = max(1, len(matchable) // 2)
        return {"all": matchable, "first_half": matchable[:half],
                "last_half": matchable[-half:]}[selection]
    names = list(selection)
    for n in names:
        if n not in matchable:
            raise ConfigError(f"layer {n!r} is not matchable; choose from {matchable}")
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate layers in selection {names}")
    return names


def capture(model, x, source: str = "finetuned", layers: list[str] | None = None,
            use_adapters: bool = True) -> ActivationCapture:
    """Record pre-activations of the matchable layers in one forward pass."""
    names = model.matchable_layers if layers is None else list(layers)
    if len(x) == 0:
        raise DataError("cannot capture activations on an empty batch")
    _, pre = model.forward(x, Graph(record=False), use_adapters=use_adapters)
    missing = [n for n in names if n not in pre]
    if missing:
        raise ConfigError(f"layers {missing} are not matchable in this model")
    return ActivationCapture({n: pre[n].data.copy() for n in names}, source)


def masks(cap: ActivationCapture) -> MaskSnapshot:
    # z == 0 maps to -1, matching the zero derivative of ReLU at 0
    return MaskSnapshot({n: np.where(z > 0, 1.0, -1.0) for n, z in cap.layers.items()})


def layer_weights(num_layers: int, scheme: str = "sequential") -> np.ndarray:
    if num_layers < 1:
        raise ConfigError("need at least one layer")
    ramp = np.arange(1, num_layers + 1, dtype=np.float64) / num_layers
    if scheme == "uniform":
        return np.ones(num_layers)
    if scheme == "sequential":
        return ramp
    if scheme == "quadratic":
        return ramp ** 2
    raise ConfigError(f"unknown weighting {scheme!r}; expected one of {WEIGHTINGS}")


def _aligned(z_ft, tau: MaskSnapshot, weights):
    z_layers = z_ft.layers if isinstance(z_ft, ActivationCapture) else z_ft
    names = list(tau.layers)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(weights) != len(names):
        raise DimensionError(f"{len(weights)} layer weights for {len(names)} layers")
    rows = None
    for n in names:
        if n not in z_layers:
            raise DimensionError(f"no pre-activation captured for layer {n!r}")
        z = z_layers[n]
        z = z.data if isinstance(z, Tensor2) else z
        if z.shape != tau.layers[n].shape:
            raise DimensionError(f"layer {n!r}: z {z.shape} vs mask {tau.layers[n].shape}")
        if rows is not None and z.shape[0] != rows:
            raise DimensionError("selected layers disagree on batch size")
        rows = z.shape[0]
    return z_layers, names, weights, rows


def _violation(z, tau, margin):
    z = z.data if isinstance(z, Tensor2) else z
    return np.maximum(0.0, margin - tau * z)


def abm_loss(z_ft, tau: MaskSnapshot, margin: float, weights) -> float:
    z_layers, names, weights, n = _aligned(z_ft, tau, weights)
    total = 0.0
    for w, name in zip(weights, names):
        v = _violation(z_layers[name], tau.layers[name], margin)
        total += w * w * float(np.sum(v * v))
    return float(total / n)


def abm_loss_grad(z_ft, tau: MaskSnapshot, margin: float, weights) -> dict[str, np.ndarray]:
    """Subgradient of :func:`abm_loss` per pre-activation entry.

    ``-2 w^2 tau (m - tau z) / N`` where the margin is violated, else 0.
    """
    z_layers, names, weights, n = _aligned(z_ft, tau, weights)
    out = {}
    for w, name in zip(weights, names):
        tau_l = tau.layers[name]
        v = _violation(z_layers[name], tau_l, margin)
        out[name] = np.where(v > 0, -2.0 * w * w * tau_l * v, 0.0) / n
    return out


def abm_loss_graph(graph: Graph, z_ft: dict[str, Tensor2], tau: MaskSnapshot, margin: float,
                   weights) -> Tensor2:
    """The same loss assembled from tape primitives, for differentiation by the engine."""
    z_layers, names, weights, n = _aligned(z_ft, tau, weights)
    total = None
    for w, name in zip(weights, names):
        signed = graph.mul(z_layers[name], Tensor2(-tau.layers[name]))
        hinge = graph.activation(graph.add_scalar(signed, margin), "relu")
        term = graph.scale(graph.sum(graph.square(hinge)), w * w)
        total = term if total is None else graph.add(total, term)
    return graph.scale(total, 1.0 / n)


def mismatch_rate(ref: ActivationCapture | MaskSnapshot, ft: ActivationCapture | MaskSnapshot) -> float:
    """Fraction of (sample, neuron) pairs whose signs disagree."""
    ref = masks(ref) if isinstance(ref, ActivationCapture) else ref
    ft = masks(ft) if isinstance(ft, ActivationCapture) else ft
    wrong = sum(int(np.sum(ref.layers[n] != ft.layers[n])) for n in ref.layers)
    count = sum(ref.layers[n].size for n in ref.layers)
    return wrong / count


@dataclass
class Stage1Record:
    step: int
    abm_loss: float
    mismatch_rate: float
    layer_share: dict[str, float] = field(default_factory=dict)


@dataclass
class Stage1Trace:
    layers: list[str]
    records: list[Stage1Record] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.abm_loss for r in self.records]

    @property
    def mismatch_rates(self) -> list[float]:
        return [r.mismatch_rate for r in self.records]

    def columns(self) -> list[str]:
        return ["step", "abm_loss", "mismatch_rate"] + [f"share_{n}" for n in self.layers]

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns())
            for r in self.records:
                writer.writerow([r.step, repr(float(r.abm_loss)), repr(float(r.mismatch_rate))]
                                + [repr(float(r.layer_share[n])) for n in self.layers])


class ReferenceModel:
    """Where the target signs come from: the base alone, or base plus an adapter."""

    def __init__(self, model_ft, pretrained_ref="base"):
        if isinstance(pretrained_ref, str) and pretrained_ref == "base":
            self.model, self.use_adapters = model_ft, False
        elif isinstance(pretrained_ref, (str, Path)):
            ref = model_ft.clone()
            ref.detach_adapters()
            ref.set_adapters(load_adapters(pretrained_ref))
            self.model, self.use_adapters = ref, True
        else:
            ft_w, ref_w = model_ft.base_weights(), pretrained_ref.base_weights()
            if ft_w.keys() != ref_w.keys() or any(not np.array_equal(ft_w[k], ref_w[k]) for k in ft_w):
                raise ConfigError("reference model does not share W0 with the model being matched")
            self.model, self.use_adapters = pretrained_ref, True

    def capture(self, x, layers) -> ActivationCapture:
        return capture(self.model, x, "pretrained", layers, use_adapters=self.use_adapters)


class _Batches:
    def __init__(self, pool: np.ndarray, size: int, policy: str, seed: int):
        self.pool = pool
        self.size = min(size, len(pool))
        self.policy = policy
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(pool))
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.policy == "fixed":
            return self.pool[self.order[:self.size]]
        if self.pos + self.size > len(self.pool):
            self.order = self.rng.permutation(len(self.pool))
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.size]
        self.pos += self.size
        return self.pool[idx]


def stage1_step_loss(model_ft, ref: ReferenceModel, x, layers, cfg: AbmConfig, weights):
    """Loss, mismatch, per-layer shares and the pre-activation tape for one batch."""
    tau = masks(ref.capture(x, layers))
    graph = Graph()
    _, pre = model_ft.forward(x, graph)
    z = {n: pre[n] for n in layers}
    loss = abm_loss(z, tau, cfg.margin, weights)
    shares = {}
    n_rows = next(iter(z.values())).rows
    for w, name in zip(weights, layers):
        v = _violation(z[name], tau.layers[name], cfg.margin)
        part = w * w * float(np.sum(v * v)) / n_rows
        shares[name] = float(part / loss) if loss > 0 else 0.0
    ft_mask = MaskSnapshot({n: np.where(z[n].data > 0, 1.0, -1.0) for n in layers})
    return loss, mismatch_rate(tau, ft_mask), shares, graph, z, tau


# overflow surfaces as NumericalError from the finiteness checks instead
@np.errstate(over="ignore", invalid="ignore")
def run_stage1(model_ft, pretrained_ref, pool, cfg: AbmConfig, seed: int = 0):
    """Train the attached adapters of ``model_ft`` against the boundary loss.

    Returns the trained adapters and a :class:`Stage1Trace` with one record
    per step (values before that step's update) plus a final record after
    the last update, evaluated on the last batch. With ``scope="selected"``
    only adapters on the matched layers are updated.
    """
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2 or len(pool) == 0:
        raise DataError("stage-1 pool is empty")
    layers = resolve_layers(model_ft, cfg.layer_selection)
    adapters = model_ft.adapters()
    if cfg.scope == "selected":
        adapters = {n: ad for n, ad in adapters.items() if n in layers}
    params = [p for ad in adapters.values() for p in ad.parameters()]
    if not params:
        raise ConfigError("no adapters in scope for boundary matching")
    weights = layer_weights(len(layers), cfg.weighting)
    ref = ReferenceModel(model_ft, pretrained_ref)
    batches = _Batches(pool, cfg.batch_size, cfg.batch_policy, seed)
    opt = make_optimizer(cfg.optimizer, params)
    trace = Stage1Trace(layers)
    x = None
    for step in range(cfg.steps):
        x = batches.next()
        loss, mm, shares, graph, z, tau = stage1_step_loss(model_ft, ref, x, layers, cfg, weights)
        if not np.isfinite(loss):
            raise NumericalError("non-finite boundary loss", step)
        trace.records.append(Stage1Record(step, loss, mm, shares))
        grads = abm_loss_grad(z, tau, cfg.margin, weights)
        opt.zero_grad()
        graph.backward_from([(z[n], grads[n]) for n in layers])
        opt.step(cfg.step_size)
        for p in params:
            if not np.all(np.isfinite(p.data)):
                raise NumericalError("adapter diverged", step)
    loss, mm, shares, *_ = stage1_step_loss(model_ft, ref, x, layers, cfg, weights)
    trace.records.append(Stage1Record(cfg.steps, loss, mm, shares))
    return model_ft.adapters(), trace
