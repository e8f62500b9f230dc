"""Small frozen networks assembled from named :class:`FrozenLinear` layers.

Each model's ``forward`` returns the logits together with the pre-activation
of every layer that feeds a nonlinearity (the *matchable* layers), keyed by
layer name. Adapters attach by name.
"""
from __future__ import annotations

import copy

import numpy as np

from .autodiff import Graph, Tensor2
from .errors import ConfigError, DimensionError
from .lora import FrozenLinear, LoraAdapter, init_adapter

_MASK_NEG = -1e9


class Model:
    kind = "base"

    def __init__(self, layers: list[FrozenLinear]):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        self.layers = {layer.name: layer for layer in layers}

    # -- structure ----------------------------------------------------------
    @property
    def layer_names(self) -> list[str]:
        return list(self.layers)

    @property
    def matchable_layers(self) -> list[str]:
        return [n for n, layer in self.layers.items() if layer.activation is not None]

    @property
    def default_placement(self) -> list[str]:
        return self.layer_names

    @property
    def input_dim(self) -> int:
        raise NotImplementedError

    @property
    def num_classes(self) -> int:
        raise NotImplementedError

    def layer(self, name: str) -> FrozenLinear:
        try:
            return self.layers[name]
        except KeyError:
            raise ConfigError(f"no layer named {name!r}; have {self.layer_names}") from None

    # -- adapters -----------------------------------------------------------
    def attach_adapters(self, rank: int, alpha: float, scheme="kaiming_a_zero_b", seed: int = 0,
                        placement: list[str] | None = None) -> None:
        placement = list(placement) if placement is not None else self.default_placement
        for i, name in enumerate(placement):
            layer = self.layer(name)
            d, k = layer.shape
            layer.adapter = init_adapter(d, k, rank, alpha, scheme, seed=seed * 1000 + i)

    def set_adapters(self, adapters: dict[str, LoraAdapter]) -> None:
        for name, ad in adapters.items():
            layer = self.layer(name)
            if (ad.d, ad.k) != layer.shape:
                raise DimensionError(f"adapter for {name} is {ad.d}x{ad.k}, layer is {layer.shape}")
            layer.adapter = ad

    def detach_adapters(self) -> None:
        for layer in self.layers.values():
            layer.adapter = None

    def adapters(self) -> dict[str, LoraAdapter]:
        return {n: layer.adapter for n, layer in self.layers.items() if layer.adapter is not None}

    def adapter_parameters(self) -> list[Tensor2]:
        return [p for ad in self.adapters().values() for p in ad.parameters()]

    def trainable_parameter_count(self) -> int:
        return sum(ad.num_parameters() for ad in self.adapters().values())

    def base_weights(self) -> dict[str, np.ndarray]:
        return {n: layer.W0.data.copy() for n, layer in self.layers.items()}

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    # -- evaluation ---------------------------------------------------------
    def _as_input(self, x) -> Tensor2:
        x = x if isinstance(x, Tensor2) else Tensor2(x)
        if x.cols != self.input_dim:
            raise DimensionError(f"input has {x.cols} features, model expects {self.input_dim}")
        return x

    def _apply(self, name, x, graph, use_adapters, probes, pre, taps=None):
        layer = self.layers[name]
        z, h = layer.forward(x, graph, use_adapter=use_adapters)
        if probes and name in probes:
            z = graph.add(z, graph.matmul(x, graph.transpose(probes[name])))
            h = graph.activation(z, layer.activation) if layer.activation else z
        if layer.activation is not None:
            pre[name] = z
        if taps is not None and name in taps:
            # cut the tape here so the adjoint of the layer output can be read off
            h = Tensor2(h.data, requires_grad=True)
            taps[name] = h
        return z, h

    def forward(self, x, graph: Graph | None = None, use_adapters: bool = True,
                probes: dict[str, Tensor2] | None = None, taps: dict | None = None):
        """Return ``(logits, pre_activations)``.

        ``probes`` maps layer names to zero-valued d x k tensors added to the
        effective weight, so their gradient is the gradient with respect to
        that layer's full weight matrix. For each key of ``taps`` the layer
        output is replaced by a fresh leaf, stored back into ``taps``.
        """
        raise NotImplementedError

    def layer_inputs(self, x, use_adapters: bool = True) -> dict[str, np.ndarray]:
        """Input matrix seen by every layer (used by manual oracles)."""
        raise NotImplementedError

    def predict(self, x) -> np.ndarray:
        logits, _ = self.forward(x, Graph(record=False))
        return np.argmax(logits.data, axis=1)

    def describe(self) -> dict:
        return {"kind": self.kind,
                "layers": {n: {"shape": list(layer.shape), "activation": layer.activation}
                           for n, layer in self.layers.items()}}


class MLP(Model):
    """Fully connected net without biases: hidden layers ``fc1..fcN`` and ``head``."""

    kind = "mlp"

    def __init__(self, weights: list[np.ndarray], activation: str = "relu"):
        layers = []
        for i, w in enumerate(weights[:-1]):
            layers.append(FrozenLinear(f"fc{i + 1}", Tensor2(w), activation=activation))
        layers.append(FrozenLinear("head", Tensor2(weights[-1])))
        for prev, nxt in zip(layers, layers[1:]):
            if prev.shape[0] != nxt.shape[1]:
                raise DimensionError(f"{prev.name} outputs {prev.shape[0]} but {nxt.name} takes {nxt.shape[1]}")
        super().__init__(layers)
        self.activation = activation

    @classmethod
    def random(cls, dims: int, widths: list[int], num_classes: int, activation="relu", seed=0):
        rng = np.random.default_rng(seed)
        sizes = [dims, *widths, num_classes]
        weights = [rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
                   for fan_in, fan_out in zip(sizes, sizes[1:])]
        return cls(weights, activation)

    @property
    def default_placement(self) -> list[str]:
        return [n for n in self.layers if n != "head"]

    @property
    def input_dim(self) -> int:
        return self.layers["fc1"].shape[1] if "fc1" in self.layers else self.layers["head"].shape[1]

    @property
    def num_classes(self) -> int:
        return self.layers["head"].shape[0]

    def forward(self, x, graph=None, use_adapters=True, probes=None, taps=None):
        graph = Graph(record=False) if graph is None else graph
        h = self._as_input(x)
        pre = {}
        for name in self.layers:
            _, h = self._apply(name, h, graph, use_adapters, probes, pre, taps)
        return h, pre

    def layer_inputs(self, x, use_adapters=True):
        h = self._as_input(x)
        graph = Graph(record=False)
        out = {}
        for name, layer in self.layers.items():
            out[name] = h.data.copy()
            _, h = layer.forward(h, graph, use_adapter=use_adapters)
        return out


class TransformerBlock(Model):
    """One single-head self-attention block plus a ReLU feed-forward sublayer.

    An input row of ``seq_len * token_dim`` features is read as ``seq_len``
    tokens. Tokens attend only within their own sequence; the block output is
    mean-pooled over tokens before the classification head. Adapters default
    to the query and value projections.
    """

    kind = "transformer"

    def __init__(self, weights: dict[str, np.ndarray], seq_len: int, activation: str = "relu"):
        order = ("q", "k", "v", "ff1", "ff2", "head")
        missing = [n for n in order if n not in weights]
        if missing:
            raise ConfigError(f"transformer weights missing {missing}")
        layers = [FrozenLinear(n, Tensor2(weights[n]), activation=activation if n == "ff1" else None)
                  for n in order]
        super().__init__(layers)
        self.seq_len = seq_len
        self.activation = activation
        self.token_dim = weights["q"].shape[1]

    @classmethod
    def random(cls, seq_len: int, token_dim: int, ff_width: int, num_classes: int,
               activation="relu", seed=0):
        rng = np.random.default_rng(seed)

        def w(out, inp):
            return rng.normal(0.0, np.sqrt(1.0 / inp), size=(out, inp))

        weights = {"q": w(token_dim, token_dim), "k": w(token_dim, token_dim),
                   "v": w(token_dim, token_dim), "ff1": w(ff_width, token_dim),
                   "ff2": w(token_dim, ff_width), "head": w(num_classes, token_dim)}
        return cls(weights, seq_len, activation)

    @property
    def default_placement(self) -> list[str]:
        return ["q", "v"]

    @property
    def input_dim(self) -> int:
        return self.seq_len * self.token_dim

    @property
    def num_classes(self) -> int:
        return self.layers["head"].shape[0]

    def _tokens(self, x: Tensor2) -> tuple[Tensor2, np.ndarray, np.ndarray]:
        batch = x.rows
        n = batch * self.seq_len
        tokens = Tensor2(x.data.reshape(n, self.token_dim))
        seq_id = np.repeat(np.arange(batch), self.seq_len)
        mask = np.where(seq_id[:, None] == seq_id[None, :], 0.0, _MASK_NEG)
        pool = (seq_id[None, :] == np.arange(batch)[:, None]).astype(np.float64) / self.seq_len
        return tokens, mask, pool

    def forward(self, x, graph=None, use_adapters=True, probes=None, taps=None):
        graph = Graph(record=False) if graph is None else graph
        x = self._as_input(x)
        tokens, mask, pool = self._tokens(x)
        pre = {}
        q, _ = self._apply("q", tokens, graph, use_adapters, probes, pre, taps)
        k, _ = self._apply("k", tokens, graph, use_adapters, probes, pre, taps)
        v, _ = self._apply("v", tokens, graph, use_adapters, probes, pre, taps)
        scores = graph.scale(graph.matmul(q, graph.transpose(k)), 1.0 / np.sqrt(self.token_dim))
        attn = graph.row_softmax(graph.add(scores, Tensor2(mask)))
        hidden = graph.add(tokens, graph.matmul(attn, v))
        _, f = self._apply("ff1", hidden, graph, use_adapters, probes, pre, taps)
        f2, _ = self._apply("ff2", f, graph, use_adapters, probes, pre, taps)
        hidden = graph.add(hidden, f2)
        pooled = graph.matmul(Tensor2(pool), hidden)
        logits, _ = self._apply("head", pooled, graph, use_adapters, probes, pre, taps)
        return logits, pre

    def layer_inputs(self, x, use_adapters=True):
        x = self._as_input(x)
        graph = Graph(record=False)
        tokens, mask, pool = self._tokens(x)
        fw = {n: (lambda inp, n=n: self.layers[n].forward(inp, graph, use_adapter=use_adapters))
              for n in self.layers}
        q, _ = fw["q"](tokens)
        k, _ = fw["k"](tokens)
        v, _ = fw["v"](tokens)
        scores = q.data @ k.data.T / np.sqrt(self.token_dim) + mask
        attn = graph.row_softmax(Tensor2(scores)).data
        hidden = tokens.data + attn @ v.data
        _, f = fw["ff1"](Tensor2(hidden))
        f2, _ = fw["ff2"](f)
        out_hidden = hidden + f2.data
        return {"q": tokens.data, "k": tokens.data, "v": tokens.data, "ff1": hidden,
                "ff2": f.data, "head": pool @ out_hidden}


def build_model(spec: dict, num_classes: int, input_dim: int, seed: int = 0) -> Model:
    """Random model from a plain-dict architecture spec."""
    kind = spec.get("kind", "mlp")
    activation = spec.get("activation", "relu")
    if kind == "mlp":
        return MLP.random(input_dim, list(spec.get("widths", [32, 32])), num_classes, activation, seed)
    if kind == "transformer":
        seq_len = int(spec.get("seq_len", 4))
        if input_dim % seq_len:
            raise ConfigError(f"input_dim {input_dim} not divisible by seq_len {seq_len}")
        return TransformerBlock.random(seq_len, input_dim // seq_len, int(spec.get("ff_width", 32)),
                                       num_classes, activation, seed)
    raise ConfigError(f"unknown model kind {kind!r}")
