"""Full model assembly, joint objective, SGD training and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .corpus import D_MAX, expand_training_units
from .encoder import EmbeddingTables, PcnnParams, bag_attention, encode_sentence
from .tiesgraph import GcnParams, exclusion_penalty, gcn_forward

log = logging.getLogger(__name__)

MAGIC = b"TIEFORGE"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.19
    theta: float = 0.18
    lam: float = 0.25
    gcn_layers: int = 2
    kernel: int = 3
    feature_maps: int = 320
    word_dim: int = 50
    pos_dim: int = 5
    max_distance: int = D_MAX
    batch_size: int = 50
    epochs: int = 10
    seed: int = 0
    graph_enabled: bool = True
    activation: str = "tanh"
    renormalize: bool = False
    clip_norm: float | None = 5.0
    dtype: str = "float64"
    debug: bool = False

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise nc.ConfigError("learning_rate, batch_size must be positive and epochs >= 0")
        if min(self.feature_maps, self.word_dim, self.pos_dim, self.gcn_layers, self.max_distance) < 1:
            raise nc.ConfigError("dimensions and gcn_layers must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise nc.ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.lam < 0:
            raise nc.ConfigError("lambda must be >= 0")
        if not 0.0 <= self.theta < 1.0:
            raise nc.ConfigError("theta must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise nc.ConfigError(f"dtype must be float64 or float32, got {self.dtype}")
        nc.activation(self.activation)
        return self

    @property
    def rel_dim(self):
        return 3 * self.feature_maps

    @property
    def effective_lambda(self):
        return self.lam if self.graph_enabled else 0.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise nc.ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class ModelParams:
    tables: EmbeddingTables
    pcnn: PcnnParams
    gcn: GcnParams
    class_bias: nc.Tensor

    def tensors(self):
        """Parameters in checkpoint block order."""
        return [*self.tables.tensors(), *self.pcnn.tensors(), *self.gcn.tensors(), self.class_bias]

    def block_names(self):
        return (["word_table", "pos1_table", "pos2_table", "filters", "filter_bias", "H0"]
                + [f"W{i}" for i in range(len(self.gcn.W))] + ["class_bias"])

    @property
    def k(self):
        return self.gcn.H0.shape[0]

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()


def _glorot(rng, shape, fan_in, fan_out, dtype):
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return nc.Tensor(rng.uniform(-r, r, size=shape).astype(dtype), requires_grad=True)


def init_params(vocab_size, k, config: TrainConfig, rng=None) -> ModelParams:
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    pos_rows = 2 * config.max_distance + 1
    d_in = config.word_dim + 2 * config.pos_dim
    d = config.rel_dim

    def emb(shape):
        return nc.Tensor(rng.uniform(-0.25, 0.25, size=shape).astype(dt), requires_grad=True)

    tables = EmbeddingTables(emb((vocab_size, config.word_dim)), emb((pos_rows, config.pos_dim)),
                             emb((pos_rows, config.pos_dim)))
    filters = _glorot(rng, (config.kernel, d_in, config.feature_maps),
                      config.kernel * d_in, config.feature_maps, dt)
    pcnn = PcnnParams(filters, nc.Tensor(np.zeros(config.feature_maps, dtype=dt), requires_grad=True))
    gcn = GcnParams(emb((k, d)), [_glorot(rng, (d, d), d, d, dt) for _ in range(config.gcn_layers)])
    return ModelParams(tables, pcnn, gcn, nc.Tensor(np.zeros(k, dtype=dt), requires_grad=True))


def propagation_matrix(graph, config: TrainConfig):
    return graph.P_hat if config.graph_enabled else np.eye(graph.k)


def relation_matrix(params: ModelParams, graph, config: TrainConfig) -> nc.Tensor:
    if graph.k != params.k:
        raise nc.DimensionError(f"graph has {graph.k} relations, parameters have {params.k}")
    return gcn_forward(propagation_matrix(graph, config), params.gcn, config.activation)


def _encode_bag(bag, params):
    return nc.stack([encode_sentence(s, params.tables, params.pcnn) for s in bag.sentences])


def forward_loss(units, params: ModelParams, graph, config: TrainConfig, lam=None):
    """Mean NLL over ``units`` plus lambda times the exclusion penalty.

    Each unit is (bag, gold relation); attention is queried by the gold
    relation's row of H.  Returns (loss, list of per-unit logit arrays).
    """
    lam = config.effective_lambda if lam is None else lam
    H = relation_matrix(params, graph, config)
    Ht = nc.transpose(H)
    cache = {}
    terms, logits_out = [], []
    for bag, gold in units:
        S = cache.get(id(bag))
        if S is None:
            S = cache[id(bag)] = _encode_bag(bag, params)
        b, _ = bag_attention(S, nc.row(H, gold))
        logits = nc.add(nc.reshape(nc.matmul(nc.reshape(b, (1, -1)), Ht), (params.k,)), params.class_bias)
        logits_out.append(logits.values.copy())
        terms.append(nc.nll_from_logits(logits, gold))
    loss = nc.scale(nc.sum_all(nc.stack(terms)), 1.0 / len(terms))
    if lam:
        loss = nc.add(loss, nc.scale(exclusion_penalty(H, graph.U), lam))
    return loss, logits_out


def _clip(tensors, max_norm):
    norm = np.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in tensors if t.grad is not None))
    if max_norm is not None and norm > max_norm:
        c = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad *= c
    return norm


def train(train_bags, config: TrainConfig, graph, vocab_size, params=None, callback=None):
    """Mini-batch SGD over per-label training units.

    Returns (params, trace) where trace is a list of (epoch, mean loss).
    """
    config.validate()
    if params is None:
        params = init_params(vocab_size, graph.k, config)
    # shuffling stream is separate from the init stream
    shuffle_rng = np.random.default_rng([config.seed, 1])
    units = expand_training_units(train_bags)
    if not units:
        raise TrainingError("no training units")
    tensors = params.tensors()
    trace = []
    last_finite = None
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(units))
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, len(units), config.batch_size)):
            batch = [units[i] for i in order[start:start + config.batch_size]]
            params.zero_grad()
            loss, _ = forward_loss(batch, params, graph, config)
            value = float(loss.values)
            if not np.isfinite(value) or value > 1e6:
                raise TrainingError(f"divergence at epoch {epoch} batch {bi}: loss={value}, "
                                    f"last finite loss={last_finite}")
            last_finite = value
            loss.backward()
            if config.debug:
                for name, t in zip(params.block_names(), tensors):
                    if t.grad is None or not np.all(np.isfinite(t.grad)):
                        raise TrainingError(f"parameter {name} got no finite gradient at batch {bi}")
            _clip(tensors, config.clip_norm)
            for t in tensors:
                if t.grad is not None:
                    t.values -= config.learning_rate * t.grad
            total += value * len(batch)
            count += len(batch)
        mean = total / count
        trace.append((epoch, mean))
        log.info("epoch %d mean loss %.5f", epoch, mean)
        if callback is not None:
            callback(epoch, mean, params)
    params.zero_grad()
    for name, t in zip(params.block_names(), tensors):
        if not np.all(np.isfinite(t.values)):
            raise TrainingError(f"parameter {name} became non-finite")
    return params, trace


def predict_bag(bag, params: ModelParams, graph, config: TrainConfig, H=None):
    """Probability over all k relations; attention is re-queried per relation."""
    if H is None:
        H = relation_matrix(params, graph, config)
    H = nc.Tensor(H.values)
    S = nc.Tensor(_encode_bag(bag, params).values)
    scores = np.empty(params.k, dtype=H.values.dtype)
    for r in range(params.k):
        h = nc.row(H, r)
        b, _ = bag_attention(S, h)
        scores[r] = b.values @ h.values + params.class_bias.values[r]
    return nc.softmax_row(nc.Tensor(scores)).values


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: ModelParams, config: TrainConfig, path, extra=None):
    """Write magic, version, JSON header, then raw little-endian parameter blocks."""
    tensors = params.tensors()
    dt = np.dtype(config.dtype).newbyteorder("<")
    header = {
        "format_version": FORMAT_VERSION,
        "k": params.k,
        "d": config.rel_dim,
        "dtype": config.dtype,
        "blocks": [[n, list(t.shape)] for n, t in zip(params.block_names(), tensors)],
        "config": config.to_dict(),
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb)
        for t in tensors:
            fh.write(np.ascontiguousarray(t.values, dtype=dt).tobytes())


def read_header(path):
    raw = Path(path).read_bytes()
    pre = len(MAGIC) + 12
    if len(raw) < pre or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[len(MAGIC):pre])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < pre + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pre:pre + hlen].decode("utf-8"))
    except ValueError:
        raise CheckpointError(f"{path}: corrupt header") from None
    return header, raw[pre + hlen:]


def load_checkpoint(path, expected_k=None, with_header=False):
    header, body = read_header(path)
    config = TrainConfig.from_dict(header["config"])
    k = header["k"]
    if expected_k is not None and expected_k != k:
        raise CheckpointError(f"{path}: checkpoint has k={k} relations, mapping has k={expected_k}")
    dt = np.dtype(header["dtype"]).newbyteorder("<")
    shapes = [tuple(s) for _, s in header["blocks"]]
    need = sum(int(np.prod(s)) for s in shapes) * dt.itemsize
    if len(body) != need:
        raise CheckpointError(f"{path}: expected {need} bytes of parameters, found {len(body)}")
    arrays, off = [], 0
    for s in shapes:
        n = int(np.prod(s)) * dt.itemsize
        arrays.append(np.frombuffer(body[off:off + n], dtype=dt).astype(config.dtype).reshape(s))
        off += n
    ts = [nc.Tensor(a, requires_grad=True) for a in arrays]
    nW = len(shapes) - 7
    if nW != config.gcn_layers:
        raise CheckpointError(f"{path}: {nW} GCN weight blocks but config says {config.gcn_layers}")
    params = ModelParams(EmbeddingTables(*ts[:3]), PcnnParams(ts[3], ts[4]),
                         GcnParams(ts[5], ts[6:6 + nW]), ts[-1])
    if params.k != k or params.gcn.H0.shape[1] != header["d"]:
        raise CheckpointError(f"{path}: block shapes disagree with header k={k}, d={header['d']}")
    if with_header:
        return params, config, header
    return params, config
