"""Low-rank adapters on frozen linear layers.

An adapted layer computes ``z = x (W0 + eta A B)^T`` with ``A`` of shape d x r,
``B`` of shape r x k and ``eta = alpha / r``. Inputs are batch x k, outputs
batch x d. ``W0`` is stored without a gradient slot and is never written.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ACTIVATIONS, Graph, Tensor2
from .errors import ConfigError, DataError, DimensionError

GAUSSIAN_STD = 0.02
CHECKPOINT_VERSION = 1
SCHEMES = ("kaiming_a_zero_b", "orthogonal", "gaussian", "from_checkpoint")


@dataclass(frozen=True)
class InitScheme:
    variant: str = "kaiming_a_zero_b"
    path: str | None = None

    def __post_init__(self):
        if self.variant not in SCHEMES:
            raise ConfigError(f"unknown init scheme {self.variant!r}; expected one of {SCHEMES}")
        if self.variant == "from_checkpoint" and not self.path:
            raise ConfigError("from_checkpoint scheme needs a path")

    @classmethod
    def parse(cls, value) -> "InitScheme":
        """Accept an InitScheme, a bare variant name, or ``from_checkpoint:<path>``."""
        if isinstance(value, InitScheme):
            return value
        if isinstance(value, str) and value.startswith("from_checkpoint:"):
            return cls("from_checkpoint", value.split(":", 1)[1])
        return cls(str(value))


@dataclass
class LoraAdapter:
    A: Tensor2
    B: Tensor2
    alpha: float
    rank: int
    seed: int | None = None

    def __post_init__(self):
        d, r = self.A.shape
        r2, k = self.B.shape
        if r != self.rank or r2 != self.rank:
            raise DimensionError(f"factor shapes {self.A.shape}, {self.B.shape} disagree with rank {self.rank}")
        if self.rank > min(d, k):
            raise ConfigError(f"rank {self.rank} exceeds min(d={d}, k={k})")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        self.A.requires_grad = True
        self.B.requires_grad = True

    @property
    def eta(self) -> float:
        return self.alpha / self.rank

    @property
    def d(self) -> int:
        return self.A.rows

    @property
    def k(self) -> int:
        return self.B.cols

    def delta(self) -> np.ndarray:
        return self.eta * (self.A.data @ self.B.data)

    def num_parameters(self) -> int:
        return self.A.data.size + self.B.data.size

    def parameters(self) -> list[Tensor2]:
        return [self.A, self.B]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(Tensor2(self.A.data.copy()), Tensor2(self.B.data.copy()),
                           self.alpha, self.rank, self.seed)


def init_adapter(d: int, k: int, rank: int, alpha: float, scheme="kaiming_a_zero_b",
                 seed: int = 0) -> LoraAdapter:
    scheme = InitScheme.parse(scheme)
    if not 1 <= rank <= min(d, k):
        raise ConfigError(f"rank {rank} out of range [1, {min(d, k)}]")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    rng = np.random.default_rng(seed)
    if scheme.variant == "kaiming_a_zero_b":
        A = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, rank))
        B = np.zeros((rank, k))
    elif scheme.variant == "orthogonal":
        q, r_ = np.linalg.qr(rng.normal(size=(d, rank)))
        # fix column signs so the draw is unique for a seed
        A = q * np.where(np.diag(r_) < 0, -1.0, 1.0)
        B = np.zeros((rank, k))
    elif scheme.variant == "gaussian":
        A = rng.normal(0.0, GAUSSIAN_STD, size=(d, rank))
        B = rng.normal(0.0, GAUSSIAN_STD, size=(rank, k))
    else:
        adapter = _single_from_checkpoint(scheme.path)
        if adapter.A.shape != (d, rank) or adapter.B.shape != (rank, k):
            raise DimensionError(
                f"checkpoint factors {adapter.A.shape}, {adapter.B.shape} do not fit d={d}, k={k}, r={rank}")
        return adapter
    return LoraAdapter(Tensor2(A), Tensor2(B), float(alpha), rank, seed)


@dataclass
class FrozenLinear:
    """A frozen weight ``W0`` (d x k) with an optional adapter and activation."""

    name: str
    W0: Tensor2
    adapter: LoraAdapter | None = None
    activation: str | None = None

    def __post_init__(self):
        self.W0.requires_grad = False
        if self.activation is not None and self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.adapter is not None and (self.adapter.d, self.adapter.k) != self.W0.shape:
            raise DimensionError(
                f"adapter {self.adapter.d}x{self.adapter.k} does not fit {self.name} weight {self.W0.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.W0.shape

    def forward(self, x: Tensor2, graph: Graph | None = None, use_adapter: bool = True):
        """Return ``(z, h)``; ``h`` is ``z`` itself for a linear layer."""
        graph = Graph(record=False) if graph is None else graph
        if x.cols != self.W0.cols:
            raise DimensionError(f"{self.name}: input {x.shape} does not match weight {self.W0.shape}")
        z = graph.matmul(x, graph.transpose(self.W0))
        if use_adapter and self.adapter is not None:
            ad = self.adapter
            low = graph.matmul(graph.matmul(x, graph.transpose(ad.B)), graph.transpose(ad.A))
            z = graph.add(z, graph.scale(low, ad.eta))
        h = graph.activation(z, self.activation) if self.activation else z
        return z, h


def forward(layer: FrozenLinear, x: Tensor2, graph: Graph | None = None):
    return layer.forward(x, graph)


def merge(layer: FrozenLinear) -> Tensor2:
    if layer.adapter is None:
        return Tensor2(layer.W0.data.copy())
    return Tensor2(layer.W0.data + layer.adapter.delta())


# -- checkpoint container ---------------------------------------------------
# A zip archive with fixed timestamps: meta.json plus one .npy per factor.

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_adapters(path, adapters: dict[str, LoraAdapter], extra: dict | None = None) -> None:
    meta = {"format": "abmlora-adapters", "version": CHECKPOINT_VERSION, "layers": {}}
    if extra:
        meta["extra"] = extra
    for name, ad in adapters.items():
        meta["layers"][name] = {"d": ad.d, "k": ad.k, "rank": ad.rank,
                                "alpha": ad.alpha, "seed": ad.seed}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, ad in adapters.items():
            _write_member(zf, f"{name}.A.npy", _npy_bytes(ad.A.data))
            _write_member(zf, f"{name}.B.npy", _npy_bytes(ad.B.data))


def read_checkpoint_meta(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read adapter checkpoint {path}: {exc}") from exc
    if meta.get("format") != "abmlora-adapters":
        raise DataError(f"{path} is not an adapter checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')}")
    return meta


def load_adapters(path) -> dict[str, LoraAdapter]:
    meta = read_checkpoint_meta(path)
    out = {}
    with zipfile.ZipFile(path) as zf:
        for name, info in meta["layers"].items():
            A = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.A.npy")), allow_pickle=False)
            B = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.B.npy")), allow_pickle=False)
            if A.shape != (info["d"], info["rank"]) or B.shape != (info["rank"], info["k"]):
                raise DataError(f"{path}: factor shapes for {name} disagree with metadata")
            out[name] = LoraAdapter(Tensor2(A), Tensor2(B), float(info["alpha"]),
                                    int(info["rank"]), info["seed"])
    return out


def _single_from_checkpoint(path) -> LoraAdapter:
    adapters = load_adapters(path)
    if len(adapters) != 1:
        raise ConfigError(f"{path} holds {len(adapters)} adapters; pick one per layer via the model loader")
    return next(iter(adapters.values()))
