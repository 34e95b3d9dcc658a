"""Encoder-decoder detection transformer for 1-D feature sequences.

A small post-norm transformer: the encoder refines projected input features
(with fixed sinusoidal positions), the decoder turns M learned queries into
M detections, and two heads emit class probabilities (background last) and
a (center, width) interval squashed into (0, 1).

All parameters are float64 `Tensor`s; `cast(np.float32)` converts in place
for lighter inference.  Attention maps can be captured per layer (averaged
over heads) for the diversity analysis.
"""

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, FormatError, ShapeError

PROFILES = ("desk", "paper")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    feature_dim: int
    hidden_dim: int = 256
    num_queries: int = 40
    encoder_layers: int = 2
    decoder_layers: int = 4
    heads: int = 8
    ffn_dim: int = 2048

    def validate(self):
        for field in ("num_classes", "feature_dim", "hidden_dim", "num_queries",
                      "encoder_layers", "decoder_layers", "heads", "ffn_dim"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.hidden_dim % 2:
            raise ConfigError("hidden_dim must be even for sin/cos position pairs")
        return self

    @staticmethod
    def for_profile(profile, num_classes, feature_dim):
        if profile == "desk":
            return ModelConfig(num_classes, feature_dim, hidden_dim=64, num_queries=16,
                               heads=4, ffn_dim=128).validate()
        if profile == "paper":
            return ModelConfig(num_classes, feature_dim).validate()
        raise ConfigError(f"unknown profile {profile!r}, expected one of {PROFILES}")


def sinusoidal_positions(length, dim, dtype=np.float64):
    """Fixed sin/cos position table, one row per time step."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim // 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * (2.0 * idx / dim))
    angles = pos * freq
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim - dim // 2])
    return table.astype(dtype)


def attention(q, k, v):
    """Scaled dot-product attention; returns (output, row-stochastic map).

    Accepts 2-D (tokens, dim) or 3-D (heads, tokens, dim) operands.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v), weights


class Affine:
    def __init__(self, rng, d_in, d_out):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias

    def params(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


class LayerNorm:
    def __init__(self, dim):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)

    def params(self, prefix):
        return [(prefix + ".gain", self.gain), (prefix + ".bias", self.bias)]


class MultiHeadAttention:
    def __init__(self, rng, dim, heads):
        self.dim = dim
        self.heads = heads
        self.wq = Affine(rng, dim, dim)
        self.wk = Affine(rng, dim, dim)
        self.wv = Affine(rng, dim, dim)
        self.wo = Affine(rng, dim, dim)

    def _split(self, x, tokens):
        # (T, d) -> (heads, T, d/heads)
        return ad.swapaxes(ad.reshape(x, (tokens, self.heads, self.dim // self.heads)), 0, 1)

    def __call__(self, q_in, kv_in, capture=None):
        m, n = q_in.shape[0], kv_in.shape[0]
        q = self._split(self.wq(q_in), m)
        k = self._split(self.wk(kv_in), n)
        v = self._split(self.wv(kv_in), n)
        out, weights = attention(q, k, v)
        if capture is not None:
            capture.append(weights.data.mean(axis=0).astype(np.float32))
        merged = ad.reshape(ad.swapaxes(out, 0, 1), (m, self.dim))
        return self.wo(merged)

    def params(self, prefix):
        out = []
        for name in ("wq", "wk", "wv", "wo"):
            out += getattr(self, name).params(f"{prefix}.{name}")
        return out


class FeedForward:
    def __init__(self, rng, dim, ffn_dim):
        self.lift = Affine(rng, dim, ffn_dim)
        self.drop = Affine(rng, ffn_dim, dim)

    def __call__(self, x):
        return self.drop(ad.relu(self.lift(x)))

    def params(self, prefix):
        return self.lift.params(prefix + ".lift") + self.drop.params(prefix + ".drop")


class EncoderLayer:
    def __init__(self, rng, dim, heads, ffn_dim):
        self.self_attn = MultiHeadAttention(rng, dim, heads)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_dim)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x, capture=None):
        x = self.norm1(x + self.self_attn(x, x, capture=capture))
        return self.norm2(x + self.ffn(x))

    def params(self, prefix):
        return (self.self_attn.params(prefix + ".self_attn") + self.norm1.params(prefix + ".norm1")
                + self.ffn.params(prefix + ".ffn") + self.norm2.params(prefix + ".norm2"))


class DecoderLayer:
    def __init__(self, rng, dim, heads, ffn_dim):
        self.self_attn = MultiHeadAttention(rng, dim, heads)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_dim)
        self.norm3 = LayerNorm(dim)

    def __call__(self, queries, memory, self_capture=None, cross_capture=None):
        queries = self.norm1(queries + self.self_attn(queries, queries, capture=self_capture))
        queries = self.norm2(queries + self.cross_attn(queries, memory, capture=cross_capture))
        return self.norm3(queries + self.ffn(queries))

    def params(self, prefix):
        return (self.self_attn.params(prefix + ".self_attn") + self.norm1.params(prefix + ".norm1")
                + self.cross_attn.params(prefix + ".cross_attn") + self.norm2.params(prefix + ".norm2")
                + self.ffn.params(prefix + ".ffn") + self.norm3.params(prefix + ".norm3"))


@dataclass
class ForwardResult:
    """One forward pass: M detections plus optional attention captures."""
    class_probs: Tensor          # (M, num_classes + 1), background last
    intervals: Tensor            # (M, 2) as (center, width) in (0, 1)
    encoder_maps: list | None = None
    decoder_self_maps: list | None = None
    decoder_cross_maps: list | None = None


class DetectionTransformer:
    def __init__(self, config: ModelConfig, rng):
        config.validate()
        self.config = config
        d = config.hidden_dim
        self.input_proj = Affine(rng, config.feature_dim, d)
        self.queries = Tensor(rng.normal(0.0, 1.0, (config.num_queries, d)) / math.sqrt(d),
                              requires_grad=True)
        self.encoder = [EncoderLayer(rng, d, config.heads, config.ffn_dim)
                        for _ in range(config.encoder_layers)]
        self.decoder = [DecoderLayer(rng, d, config.heads, config.ffn_dim)
                        for _ in range(config.decoder_layers)]
        self.class_head = Affine(rng, d, config.num_classes + 1)
        reg_hidden = d
        self.reg_head = [Affine(rng, d, reg_hidden), Affine(rng, reg_hidden, reg_hidden),
                         Affine(rng, reg_hidden, 2)]
        self._pos_cache = {}

    # -- forward ---------------------------------------------------------

    def _positions(self, length, dtype):
        key = (length, np.dtype(dtype).str)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_positions(length, self.config.hidden_dim, dtype)
        return self._pos_cache[key]

    def encode(self, features, capture=None):
        features = ad.as_tensor(features)
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise ShapeError(f"expected (L, {self.config.feature_dim}) features, got {features.shape}")
        x = self.input_proj(features)
        x = x + Tensor(self._positions(features.shape[0], x.data.dtype))
        for layer in self.encoder:
            x = layer(x, capture=capture)
        return x

    def decode(self, memory, queries=None, self_capture=None, cross_capture=None):
        q = self.queries if queries is None else queries
        if q.shape[-1] != self.config.hidden_dim:
            raise ShapeError(f"query dim {q.shape[-1]} != hidden dim {self.config.hidden_dim}")
        for layer in self.decoder:
            q = layer(q, memory, self_capture=self_capture, cross_capture=cross_capture)
        return q

    def run_heads(self, states):
        probs = ad.softmax(self.class_head(states), axis=-1)
        h = states
        for layer in self.reg_head[:-1]:
            h = ad.relu(layer(h))
        intervals = ad.sigmoid(self.reg_head[-1](h))
        return probs, intervals

    def forward(self, features, queries=None, capture=False):
        enc_maps = [] if capture else None
        self_maps = [] if capture else None
        cross_maps = [] if capture else None
        memory = self.encode(features, capture=enc_maps)
        states = self.decode(memory, queries=queries,
                             self_capture=self_maps, cross_capture=cross_maps)
        probs, intervals = self.run_heads(states)
        return ForwardResult(probs, intervals, enc_maps, self_maps, cross_maps)

    # -- parameters --------------------------------------------------------

    def params(self):
        """Deterministically ordered (name, tensor) pairs."""
        out = self.input_proj.params("input_proj")
        out.append(("queries", self.queries))
        for i, layer in enumerate(self.encoder):
            out += layer.params(f"encoder.{i}")
        for i, layer in enumerate(self.decoder):
            out += layer.params(f"decoder.{i}")
        out += self.class_head.params("class_head")
        for i, layer in enumerate(self.reg_head):
            out += layer.params(f"reg_head.{i}")
        return out

    def param_tensors(self):
        return [t for _, t in self.params()]

    def zero_grads(self):
        for t in self.param_tensors():
            t.zero_grad()

    def cast(self, dtype):
        for _, t in self.params():
            t.data = t.data.astype(dtype)
        self._pos_cache.clear()
        return self

    def reinit_class_head(self, rng, num_classes):
        """Swap in a fresh classification head for `num_classes` categories."""
        self.config = replace(self.config, num_classes=num_classes)
        self.class_head = Affine(rng, self.config.hidden_dim, num_classes + 1)


# -- tensor archives ---------------------------------------------------------

_HEADER_NAME = "checkpoint.json"
_WEIGHTS_NAME = "weights.bin"


def save_archive(directory, named_arrays, extra=None):
    """Write named float64 arrays as checkpoint.json + weights.bin."""
    os.makedirs(directory, exist_ok=True)
    records = []
    offset = 0
    blobs = []
    for name, arr in named_arrays:
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        blob = arr.astype("<f8").tobytes()
        records.append({"name": name, "shape": list(arr.shape), "dtype": "f64le",
                        "byte_offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"tensors": records, "extra": extra or {}}
    with open(os.path.join(directory, _WEIGHTS_NAME), "wb") as fh:
        for blob in blobs:
            fh.write(blob)
    text = json.dumps(header, sort_keys=True, indent=1)
    with open(os.path.join(directory, _HEADER_NAME), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_archive(directory):
    """Read an archive back; returns (dict name -> array, extra dict)."""
    header_path = os.path.join(directory, _HEADER_NAME)
    try:
        with open(header_path, "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"missing {header_path}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable checkpoint header: {exc}", offset=exc.pos)
    with open(os.path.join(directory, _WEIGHTS_NAME), "rb") as fh:
        payload = fh.read()
    arrays = {}
    for rec in header.get("tensors", []):
        if rec.get("dtype") != "f64le":
            raise FormatError(f"tensor {rec.get('name')!r} has unsupported dtype {rec.get('dtype')!r}")
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = rec["byte_offset"]
        end = start + 8 * count
        if end > len(payload):
            raise FormatError(f"weights.bin truncated reading {rec['name']!r}", offset=start)
        arrays[rec["name"]] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
    return arrays, header.get("extra", {})


def load_into_model(model, arrays):
    """Copy archive arrays into model parameters by name."""
    for name, tensor in model.params():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != tensor.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arrays[name].shape}, "
                f"model {tensor.data.shape}")
        tensor.data = arrays[name].astype(tensor.data.dtype)
