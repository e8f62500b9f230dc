"""Gradient geometry of a low-rank adapter at its initial factors.

Shapes follow the adapter convention: ``g`` and ``W0`` are d x k, ``A0`` is
d x r and ``B0`` is r x k.

Two projections are provided. :func:`tangent_projection` evaluates
``g B0^T B0 + A0 A0^T g`` as written; it coincides with an orthogonal
projector only when ``A0`` has orthonormal columns and ``B0 = 0``.
:func:`orthogonal_tangent_projection` is the exact orthogonal projector onto
the first-order reachable set ``{A0 X + Y B0}``; it agrees with the former in
that regime and is non-expansive for any factors. Reports default to the
orthogonal projector.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Graph, Tensor2, activation_derivative
from .errors import ConfigError, ConsistencyError, DimensionError

NONEXPANSIVE_SLACK = 1e-9
PROJECTIONS = ("orthogonal", "verbatim")


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor2) else np.asarray(x, dtype=np.float64)


def _check_shapes(g, A0, B0):
    d, k = g.shape
    if A0.ndim != 2 or B0.ndim != 2 or A0.shape[0] != d or B0.shape[1] != k or A0.shape[1] != B0.shape[0]:
        raise DimensionError(f"expected g d x k, A0 d x r, B0 r x k; got g {g.shape}, "
                             f"A0 {A0.shape}, B0 {B0.shape}")


def tangent_projection(g, A0, B0) -> Tensor2:
    g, A0, B0 = _arr(g), _arr(A0), _arr(B0)
    _check_shapes(g, A0, B0)
    return Tensor2(g @ B0.T @ B0 + A0 @ (A0.T @ g))


def _range_basis(m: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis for the column space of ``m``."""
    if m.size == 0:
        return np.zeros((m.shape[0], 0))
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((m.shape[0], 0))
    return u[:, s > rtol * s[0]]


def orthogonal_tangent_projection(g, A0, B0) -> Tensor2:
    g, A0, B0 = _arr(g), _arr(A0), _arr(B0)
    _check_shapes(g, A0, B0)
    U = _range_basis(A0)
    V = _range_basis(B0.T)
    left = U @ (U.T @ g)
    return Tensor2(left + (g - left) @ V @ V.T)


def project(g, A0, B0, projection: str = "orthogonal") -> np.ndarray:
    if projection == "orthogonal":
        return orthogonal_tangent_projection(g, A0, B0).data
    if projection == "verbatim":
        return tangent_projection(g, A0, B0).data
    raise ConfigError(f"unknown projection {projection!r}; expected one of {PROJECTIONS}")


def info_loss(g, A0, B0, projection: str = "verbatim") -> float:
    """Squared Frobenius norm of the gradient component the adapter discards."""
    g = _arr(g)
    r = g - project(g, A0, B0, projection)
    return float(np.sum(r * r))


def first_order_update_check(A0, B0, g, gamma: float, eta: float) -> float:
    """Residual of the first-order expansion of one descent step on (A, B)."""
    if gamma < 0:
        raise ConfigError("gamma must be nonnegative")
    A0, B0, g = _arr(A0), _arr(B0), _arr(g)
    _check_shapes(g, A0, B0)
    ge = gamma * eta
    A1 = A0 - ge * g @ B0.T
    B1 = B0 - ge * A0.T @ g
    resid = (A1 @ B1 - A0 @ B0) + ge * (g @ B0.T @ B0 + A0 @ A0.T @ g)
    return float(np.linalg.norm(resid))


@dataclass
class InfoLossReport:
    step: int
    total_discrepancy: float
    unavoidable: float
    reducible: float
    upper_bound: float
    pythagorean_residual: float
    bound_margin: float

    def as_row(self) -> dict:
        return asdict(self)


def decompose(g, grad_delta, A0, B0, step: int = 0, projection: str = "orthogonal",
              check: bool = True) -> InfoLossReport:
    """Split the adapter's gradient discrepancy into unavoidable and reducible parts.

    ``bound_margin`` is ``upper_bound - reducible`` (nonnegative when the
    non-expansiveness inequality holds). With ``check`` set, a violation
    beyond the relative slack raises :class:`ConsistencyError`.
    """
    g, gd = _arr(g), _arr(grad_delta)
    if g.shape != gd.shape:
        raise DimensionError(f"g {g.shape} and adapter gradient {gd.shape} differ in shape")
    pg = project(g, A0, B0, projection)
    pgd = project(gd, A0, B0, projection)

    def sq(m):
        return float(np.sum(m * m))

    total = sq(g - pgd)
    unavoidable = sq(g - pg)
    reducible = sq(pg - pgd)
    upper = sq(g - gd)
    report = InfoLossReport(step, total, unavoidable, reducible, upper,
                            abs(total - unavoidable - reducible), upper - reducible)
    if check and reducible > upper + NONEXPANSIVE_SLACK * max(upper, reducible, 1e-300):
        raise ConsistencyError(
            f"step {step}: reducible {reducible:.6e} exceeds upper bound {upper:.6e}")
    return report


# -- gradients of a layer's full weight ------------------------------------

def layer_gradient(model, x, labels, layer: str, use_adapters: bool = True) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to one layer's effective weight."""
    d, k = model.layer(layer).shape
    probe = Tensor2.zeros(d, k, requires_grad=True)
    graph = Graph()
    logits, _ = model.forward(x, graph, use_adapters=use_adapters, probes={layer: probe})
    loss = graph.softmax_cross_entropy(logits, labels)
    graph.backward(loss)
    return probe.grad.copy()


def full_and_adapter_gradients(model, x, labels, layer: str):
    """``(g, grad_delta)``: adapters detached (weights exactly W0) vs attached."""
    return (layer_gradient(model, x, labels, layer, use_adapters=False),
            layer_gradient(model, x, labels, layer, use_adapters=True))


def grad_diff_nonlinear(model_base, model_adapted, batch, layer: str,
                        error: str = "full") -> Tensor2:
    """Difference ``g - grad_delta`` at one activated layer.

    ``error="full"`` runs two complete backward passes, one through the base
    model and one through the adapted model. ``error="pretrained"`` evaluates
    both gradients with the layer input and backpropagated error taken from
    the base model, so only the activation derivative differs between them.
    """
    x, labels = batch
    if len(labels) == 0:
        raise DimensionError("empty batch")
    base_w = model_base.base_weights()
    for name, w in model_adapted.base_weights().items():
        if name not in base_w or not np.array_equal(base_w[name], w):
            raise ConfigError(f"models do not share W0 at layer {name!r}")
    if error == "full":
        g = layer_gradient(model_base, x, labels, layer, use_adapters=False)
        gd = layer_gradient(model_adapted, x, labels, layer, use_adapters=True)
        return Tensor2(g - gd)
    if error != "pretrained":
        raise ConfigError(f"unknown error mode {error!r}")
    lyr = model_adapted.layer(layer)
    if lyr.activation is None:
        raise ConfigError(f"layer {layer!r} has no nonlinearity")
    inputs = model_base.layer_inputs(x, use_adapters=False)[layer]
    W0 = lyr.W0.data
    z0 = inputs @ W0.T
    delta = _output_error(model_base, x, labels, layer)
    w_adapted = W0 + (lyr.adapter.delta() if lyr.adapter is not None else 0.0)
    z1 = inputs @ w_adapted.T
    d0 = activation_derivative(z0, lyr.activation) * delta
    d1 = activation_derivative(z1, lyr.activation) * delta
    return Tensor2(d0.T @ inputs - d1.T @ inputs)


def _output_error(model, x, labels, layer: str) -> np.ndarray:
    """Backpropagated error ``dl/dh`` at the output of ``layer``, base model."""
    graph = Graph()
    taps = {layer: None}
    logits, _ = model.forward(x, graph, use_adapters=False, taps=taps)
    graph.backward(graph.softmax_cross_entropy(logits, labels))
    h = taps[layer]
    return h.grad if h.grad is not None else np.zeros_like(h.data)
