"""Graph Isomorphism Network: sum aggregation, MLP combine, sum-pool readout."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError, ShapeError
from .graph import Graph, GraphBatch

CHECKPOINT_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Readout(str, enum.Enum):
    SUM_LAST = "sum-last"
    SUM_CONCAT = "sum-concat"


@dataclass(frozen=True)
class GinConfig:
    num_layers: int = 5
    num_mlp_layers: int = 2
    hidden_dim: int = 64
    learn_eps: bool = False
    readout: Readout = Readout.SUM_CONCAT
    batch_norm: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.num_layers < 1 or self.num_mlp_layers < 1 or self.hidden_dim < 1:
            raise ConfigError(f"invalid GIN shape: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        object.__setattr__(self, "readout", Readout(self.readout))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["readout"] = self.readout.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GinConfig:
        return cls(**d)


@dataclass
class LayerParams:
    """Weights of one COMBINE MLP plus its epsilon."""

    weights: list[Tensor]
    biases: list[Tensor]
    eps: Tensor | None = None


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def aggregate(graph: Graph | GraphBatch, h_prev) -> Tensor:
    """Row ``v`` of the result is the sum of ``h_prev`` over the neighbours of ``v``."""
    h_prev = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
    if h_prev.ndim != 2 or h_prev.shape[0] != graph.num_vertices:
        raise ShapeError(
            f"aggregate: expected {graph.num_vertices} rows, got shape {h_prev.shape}"
        )
    return ad.spmm(graph.adjacency, h_prev)


def combine(h_prev, agg, layer: LayerParams, eps: float | Tensor = 0.0) -> Tensor:
    """``MLP((1 + eps) * h_prev + agg)`` with ReLU between (not after) MLP layers."""
    h_prev = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
    agg = agg if isinstance(agg, Tensor) else Tensor(agg)
    if h_prev.shape != agg.shape:
        raise ShapeError(f"combine: h {h_prev.shape} vs aggregate {agg.shape}")
    if layer.weights[0].shape[0] != h_prev.shape[1]:
        raise ShapeError(
            f"combine: layer expects width {layer.weights[0].shape[0]}, got {h_prev.shape[1]}"
        )
    if layer.eps is not None:
        eps = layer.eps
    if isinstance(eps, Tensor):
        x = h_prev * (eps + 1.0) + agg
    elif eps == 0.0:
        x = h_prev + agg
    else:
        x = h_prev * (1.0 + eps) + agg
    last = len(layer.weights) - 1
    for i, (w, b) in enumerate(zip(layer.weights, layer.biases)):
        x = x @ w + b
        if i < last:
            x = ad.relu(x)
    return x


def readout(layer_outputs: Sequence[Tensor], graph: Graph | GraphBatch,
            mode: Readout = Readout.SUM_CONCAT) -> Tensor:
    """Sum-pool vertex embeddings into one row per graph.

    ``SUM_LAST`` pools only the final layer; ``SUM_CONCAT`` concatenates the
    pooled sums of every layer.
    """
    pool = graph.pooling if isinstance(graph, GraphBatch) else None

    def pooled(h: Tensor) -> Tensor:
        if pool is None:
            return ad.reshape(h.sum(axis=0), (1, h.shape[1]))
        return ad.spmm(pool, h)

    if Readout(mode) is Readout.SUM_LAST:
        return pooled(layer_outputs[-1])
    return ad.concat([pooled(h) for h in layer_outputs], axis=1)


class GIN:
    """Parameters and forward pass of a GIN graph classifier.

    The final classifier is zero-initialized, so an untrained model predicts
    the uniform distribution for every graph.
    """

    def __init__(self, config: GinConfig, in_dim: int, num_classes: int, seed: int = 0):
        self.config = config
        self.in_dim = in_dim
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        self.layers: list[LayerParams] = []
        width = in_dim
        for _ in range(config.num_layers):
            weights, biases = [], []
            for j in range(config.num_mlp_layers):
                fan_in = width if j == 0 else config.hidden_dim
                weights.append(_uniform(rng, fan_in, (fan_in, config.hidden_dim)))
                biases.append(_uniform(rng, fan_in, (config.hidden_dim,)))
            eps = Tensor(np.zeros(()), requires_grad=True) if config.learn_eps else None
            self.layers.append(LayerParams(weights, biases, eps))
            width = config.hidden_dim
        self.bn_scale: list[Tensor] = []
        self.bn_shift: list[Tensor] = []
        self.bn_running: list[tuple[np.ndarray, np.ndarray]] = []
        if config.batch_norm:
            for _ in range(config.num_layers):
                self.bn_scale.append(Tensor(np.ones(config.hidden_dim), requires_grad=True))
                self.bn_shift.append(Tensor(np.zeros(config.hidden_dim), requires_grad=True))
                self.bn_running.append((np.zeros(config.hidden_dim), np.ones(config.hidden_dim)))
        self.readout_dim = config.hidden_dim * (
            config.num_layers if config.readout is Readout.SUM_CONCAT else 1
        )
        self.classifier_w = Tensor(np.zeros((self.readout_dim, num_classes)), requires_grad=True)
        self.classifier_b = Tensor(np.zeros(num_classes), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors keyed by a stable name."""
        params: dict[str, Tensor] = {}
        for k, layer in enumerate(self.layers):
            for j, (w, b) in enumerate(zip(layer.weights, layer.biases)):
                params[f"layer{k}.mlp{j}.weight"] = w
                params[f"layer{k}.mlp{j}.bias"] = b
            if layer.eps is not None:
                params[f"layer{k}.eps"] = layer.eps
        for k, (g, b) in enumerate(zip(self.bn_scale, self.bn_shift)):
            params[f"layer{k}.bn.scale"] = g
            params[f"layer{k}.bn.shift"] = b
        params["classifier.weight"] = self.classifier_w
        params["classifier.bias"] = self.classifier_b
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (mean, var) in enumerate(self.bn_running):
            out[f"layer{k}.bn.running_mean"] = mean
            out[f"layer{k}.bn.running_var"] = var
        return out

    def _batch_norm(self, k: int, x: Tensor, training: bool) -> Tensor:
        mean_run, var_run = self.bn_running[k]
        if training:
            n = x.shape[0]
            mean = x.sum(axis=0) * (1.0 / n)
            centered = x - mean
            var = (centered * centered).sum(axis=0) * (1.0 / n)
            mean_run *= 1.0 - BN_MOMENTUM
            mean_run += BN_MOMENTUM * mean.data
            var_run *= 1.0 - BN_MOMENTUM
            var_run += BN_MOMENTUM * var.data * (n / max(n - 1, 1))
            x_hat = centered / ((var + BN_EPS) ** 0.5)
        else:
            x_hat = (x - mean_run) * (1.0 / np.sqrt(var_run + BN_EPS))
        return x_hat * self.bn_scale[k] + self.bn_shift[k]

    def embed(self, graph: Graph | GraphBatch, training: bool = False,
              rng: np.random.Generator | None = None) -> tuple[Tensor, list[Tensor]]:
        """Graph-level representation and the per-layer vertex embeddings."""
        if graph.features.shape[1] != self.in_dim:
            raise ShapeError(f"model expects {self.in_dim} features, graph has {graph.features.shape[1]}")
        h = Tensor(graph.features)
        outputs = []
        for k, layer in enumerate(self.layers):
            h = combine(h, aggregate(graph, h), layer)
            if self.config.batch_norm:
                h = self._batch_norm(k, h, training)
            h = ad.relu(h)
            if training and self.config.dropout > 0.0:
                keep = 1.0 - self.config.dropout
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
            outputs.append(h)
        return readout(outputs, graph, self.config.readout), outputs

    def logits(self, graph: Graph | GraphBatch, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        h_g, _ = self.embed(graph, training, rng)
        return h_g @ self.classifier_w + self.classifier_b

    def forward(self, graph: Graph | GraphBatch, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Class logits and softmax probabilities, one row per graph."""
        z = self.logits(graph, training, rng)
        return z, ad.row_softmax(z)

    def predict_proba(self, graphs: Sequence[Graph], batch_size: int = 256) -> np.ndarray:
        """Softmax outputs for ``graphs`` in evaluation mode (no tape)."""
        rows = []
        for start in range(0, len(graphs), batch_size):
            batch = GraphBatch(list(graphs[start:start + batch_size]))
            _, probs = self.forward(batch)
            rows.append(probs.data)
        if not rows:
            return np.zeros((0, self.num_classes))
        return np.concatenate(rows, axis=0)

    def predict(self, graphs: Sequence[Graph]) -> np.ndarray:
        """Argmax class per graph, ties resolved to the lowest class index."""
        return np.argmax(self.predict_proba(graphs), axis=1)

    # --- checkpoints -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "in_dim": self.in_dim,
            "num_classes": self.num_classes,
        }
        arrays = {f"param:{k}": v.data for k, v in self.parameters().items()}
        arrays.update({f"buffer:{k}": v for k, v in self.buffers().items()})
        np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> GIN:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
            model = cls(GinConfig.from_dict(meta["config"]), meta["in_dim"], meta["num_classes"])
            params = model.parameters()
            buffers = model.buffers()
            for key in z.files:
                kind, _, name = key.partition(":")
                if kind == "param":
                    params[name].data = z[key].copy()
                elif kind == "buffer":
                    buffers[name][...] = z[key]
        return model

    def copy(self) -> GIN:
        clone = GIN.__new__(GIN)
        clone.__dict__.update(self.__dict__)
        clone.layers = [
            LayerParams([Tensor(w.data.copy(), True) for w in l.weights],
                        [Tensor(b.data.copy(), True) for b in l.biases],
                        None if l.eps is None else Tensor(l.eps.data.copy(), True))
            for l in self.layers
        ]
        clone.bn_scale = [Tensor(t.data.copy(), True) for t in self.bn_scale]
        clone.bn_shift = [Tensor(t.data.copy(), True) for t in self.bn_shift]
        clone.bn_running = [(m.copy(), v.copy()) for m, v in self.bn_running]
        clone.classifier_w = Tensor(self.classifier_w.data.copy(), True)
        clone.classifier_b = Tensor(self.classifier_b.data.copy(), True)
        return clone
