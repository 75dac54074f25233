"""Toy post-LN transformer encoder for sequence classification.

Small enough to finetune on a laptop CPU in minutes, yet structured like
the encoders the rank-allocation method targets: per layer it exposes
four adaptable projection matrices (query, key, value, and the feed
forward input projection, called "dense" here).

Simplifications relative to a production encoder: no dropout, no
attention mask (batches are padded to a shared length and pad positions
participate in attention), no biases on the projection matrices, and
first-token pooling straight into a linear classifier head.
"""

from __future__ import annotations

import json
import math
import hashlib
from dataclasses import dataclass, asdict
from enum import Enum

import numpy as np

from . import tensor as T
from .rng import RngStream, StreamTag, fnv1a64, gaussian


class ModuleKind(str, Enum):
    """The four per-layer weight matrices eligible for adaptation."""

    QUERY = "query"
    KEY = "key"
    VALUE = "value"
    DENSE = "dense"  # feed-forward input projection, d_model -> d_ff


# kind-major ordering used everywhere a flat module list appears
KIND_ORDER = (ModuleKind.QUERY, ModuleKind.KEY, ModuleKind.VALUE, ModuleKind.DENSE)

# single-letter aliases accepted on the command line
KIND_ALIASES = {"q": ModuleKind.QUERY, "k": ModuleKind.KEY,
                "v": ModuleKind.VALUE, "d": ModuleKind.DENSE}


def parse_kind(name: str) -> ModuleKind:
    name = name.strip().lower()
    if name in KIND_ALIASES:
        return KIND_ALIASES[name]
    try:
        return ModuleKind(name)
    except ValueError:
        raise ValueError(f"unknown module kind {name!r}") from None


@dataclass(frozen=True)
class ModulePath:
    """Identifies one adaptable matrix: a kind plus a layer index."""

    kind: ModuleKind
    layer: int

    def __str__(self):
        return f"{self.kind.value}.{self.layer}"

    @classmethod
    def parse(cls, text: str) -> "ModulePath":
        kind_name, _, layer = text.partition(".")
        try:
            return cls(parse_kind(kind_name), int(layer))
        except ValueError:
            raise ValueError(f"bad module path {text!r}; expected e.g. 'query.0'") from None

    @property
    def weight_key(self) -> str:
        return f"layer.{self.layer}.{self.kind.value}"


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 8192
    max_seq_len: int = 64
    n_classes: int = 2
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size",
                     "max_seq_len", "n_classes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def module_shape(self, kind: ModuleKind) -> tuple:
        if kind is ModuleKind.DENSE:
            return (self.d_model, self.d_ff)
        return (self.d_model, self.d_model)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


def list_modules(config: ModelConfig, kinds=None) -> list:
    """Adaptable module paths, kind-major: every layer of one kind, then the next.

    ``kinds`` restricts to a subset; ordering always follows KIND_ORDER.
    """
    if kinds is None:
        kinds = set(KIND_ORDER)
    else:
        kinds = set(kinds)
    if not kinds:
        raise ValueError("kinds must be nonempty")
    return [ModulePath(kind, layer)
            for kind in KIND_ORDER if kind in kinds
            for layer in range(config.n_layers)]


@dataclass
class InputBatch:
    """Padded token ids (batch, seq) with optional integer labels (batch,)."""

    ids: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 2:
            raise ValueError(f"ids must be 2-D, got shape {self.ids.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.ids.shape[0],):
                raise ValueError("labels must be one per sequence")

    def __len__(self):
        return self.ids.shape[0]

    def validate(self, config: ModelConfig):
        if self.ids.shape[1] > config.max_seq_len:
            raise ValueError(
                f"sequence length {self.ids.shape[1]} exceeds max_seq_len={config.max_seq_len}")
        if self.ids.min() < 0 or self.ids.max() >= config.vocab_size:
            raise ValueError("token id out of range for vocabulary")
        if self.labels is not None and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= config.n_classes:
                raise ValueError("label out of range for n_classes")


def _param_shapes(config: ModelConfig) -> dict:
    c = config
    shapes = {
        "embed.word": (c.vocab_size, c.d_model),
        "embed.pos": (c.max_seq_len, c.d_model),
        "embed.norm.gain": (c.d_model,),
        "embed.norm.bias": (c.d_model,),
    }
    for i in range(c.n_layers):
        p = f"layer.{i}."
        shapes[p + "query"] = (c.d_model, c.d_model)
        shapes[p + "key"] = (c.d_model, c.d_model)
        shapes[p + "value"] = (c.d_model, c.d_model)
        shapes[p + "attn_out"] = (c.d_model, c.d_model)
        shapes[p + "norm1.gain"] = (c.d_model,)
        shapes[p + "norm1.bias"] = (c.d_model,)
        shapes[p + "dense"] = (c.d_model, c.d_ff)
        shapes[p + "ff_out"] = (c.d_ff, c.d_model)
        shapes[p + "norm2.gain"] = (c.d_model,)
        shapes[p + "norm2.bias"] = (c.d_model,)
    shapes["head.weight"] = (c.d_model, c.n_classes)
    shapes["head.bias"] = (c.n_classes,)
    return shapes


def _gaussian_param_keys(config: ModelConfig):
    keys = ["embed.word", "embed.pos"]
    for i in range(config.n_layers):
        keys += [f"layer.{i}.{name}"
                 for name in ("query", "key", "value", "attn_out", "dense", "ff_out")]
    return keys


class TransformerModel:
    """Weights plus a differentiable forward pass; see module docstring."""

    def __init__(self, config: ModelConfig, weights: dict):
        self.config = config
        self.weights = weights

    # --- construction -------------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "TransformerModel":
        """Deterministic init: N(0, init_std) matrices, unit norms, zero biases.

        Each matrix draws from a substream keyed by its own name, so its
        values never depend on the shapes or presence of the others.  The
        head uses a separate stream: scoring shares one head across
        perturbed instances and must be able to rebuild it in isolation.
        """
        shapes = _param_shapes(config)
        weights = {}
        init_stream = RngStream(seed, StreamTag.MODEL_INIT)
        head_stream = RngStream(seed, StreamTag.HEAD_INIT)
        for key in _gaussian_param_keys(config):
            sub = init_stream.substream(fnv1a64(key))
            weights[key] = T.Tensor(gaussian(shapes[key], 0.0, config.init_std, sub))
        weights["head.weight"] = T.Tensor(
            gaussian(shapes["head.weight"], 0.0, config.init_std,
                     head_stream.substream(fnv1a64("head.weight"))))
        for key, shape in shapes.items():
            if key in weights:
                continue
            if key.endswith(".gain"):
                weights[key] = T.Tensor(np.ones(shape))
            else:  # every remaining key is a bias
                weights[key] = T.Tensor(np.zeros(shape))
        return cls(config, weights)

    # --- weight access ------------------------------------------------------

    @staticmethod
    def _key_of(path) -> str:
        if isinstance(path, ModulePath):
            return path.weight_key
        return str(path)

    def get_weights(self, path) -> np.ndarray:
        """Copy of one named weight; accepts a ModulePath or a weight key."""
        key = self._key_of(path)
        try:
            return self.weights[key].data.copy()
        except KeyError:
            raise KeyError(f"model has no weight {key!r}") from None

    def set_weights(self, path, array):
        key = self._key_of(path)
        if key not in self.weights:
            raise KeyError(f"model has no weight {key!r}")
        current = self.weights[key]
        array = np.asarray(array, dtype=np.float64)
        if array.shape != current.data.shape:
            raise ValueError(
                f"shape mismatch for {key}: got {array.shape}, expected {current.data.shape}")
        current.data = np.ascontiguousarray(array)

    def module_tensor(self, path: ModulePath) -> T.Tensor:
        try:
            return self.weights[path.weight_key]
        except KeyError:
            raise KeyError(f"model has no module {path}") from None

    def all_weights(self) -> dict:
        return {k: v.data.copy() for k, v in sorted(self.weights.items())}

    def fingerprint(self) -> str:
        """SHA-256 over sorted names and raw little-endian float64 bytes."""
        h = hashlib.sha256()
        for key in sorted(self.weights):
            h.update(key.encode("utf-8"))
            h.update(self.weights[key].data.astype("<f8", copy=False).tobytes())
        return h.hexdigest()

    def copy(self) -> "TransformerModel":
        weights = {k: v.copy() for k, v in self.weights.items()}
        return TransformerModel(ModelConfig(**self.config.to_dict()), weights)

    # --- forward ------------------------------------------------------------

    def _project(self, x2d: T.Tensor, path: ModulePath, adapters) -> T.Tensor:
        y = T.matmul(x2d, self.weights[path.weight_key])
        if adapters:
            adapter = adapters.get(path)
            if adapter is not None:
                y = T.add(y, adapter.contribution(x2d))
        return y

    def encode(self, batch: InputBatch, adapters=None) -> T.Tensor:
        """Run the encoder stack; returns pooled (batch, d_model) features."""
        batch.validate(self.config)
        c = self.config
        b, s = batch.ids.shape
        eps = c.ln_eps

        tok = T.embedding_lookup(self.weights["embed.word"], batch.ids)
        pos = T.embedding_lookup(self.weights["embed.pos"], np.arange(s))
        x = T.add(tok, pos)  # (b, s, d); pos broadcasts over the batch
        x = T.reshape(x, (b * s, c.d_model))
        x = T.layer_norm(x, self.weights["embed.norm.gain"],
                         self.weights["embed.norm.bias"], eps)

        inv_sqrt_hd = 1.0 / math.sqrt(c.head_dim)
        for i in range(c.n_layers):
            q = self._project(x, ModulePath(ModuleKind.QUERY, i), adapters)
            k = self._project(x, ModulePath(ModuleKind.KEY, i), adapters)
            v = self._project(x, ModulePath(ModuleKind.VALUE, i), adapters)

            def split(t):
                # (b*s, d) -> (b, heads, s, head_dim)
                return T.transpose(T.reshape(t, (b, s, c.n_heads, c.head_dim)),
                                   (0, 2, 1, 3))

            scores = T.scale(T.matmul(split(q), T.transpose(split(k), (0, 1, 3, 2))),
                             inv_sqrt_hd)
            attn = T.softmax_lastdim(scores)
            ctx = T.matmul(attn, split(v))  # (b, heads, s, head_dim)
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b * s, c.d_model))
            out = T.matmul(ctx, self.weights[f"layer.{i}.attn_out"])
            x = T.layer_norm(T.add(x, out),
                             self.weights[f"layer.{i}.norm1.gain"],
                             self.weights[f"layer.{i}.norm1.bias"], eps)

            hidden = T.gelu(self._project(x, ModulePath(ModuleKind.DENSE, i), adapters))
            ff = T.matmul(hidden, self.weights[f"layer.{i}.ff_out"])
            x = T.layer_norm(T.add(x, ff),
                             self.weights[f"layer.{i}.norm2.gain"],
                             self.weights[f"layer.{i}.norm2.bias"], eps)

        return T.first_token(T.reshape(x, (b, s, c.d_model)))

    def forward(self, batch: InputBatch, adapters=None) -> T.Tensor:
        """Logits (batch, n_classes) for a padded batch of token ids."""
        pooled = self.encode(batch, adapters=adapters)
        return T.add(T.matmul(pooled, self.weights["head.weight"]),
                     self.weights["head.bias"])

    # --- persistence --------------------------------------------------------

    def save(self, path):
        arrays = {k: v.data.astype("<f8") for k, v in self.weights.items()}
        arrays["__config__"] = _encode_json(self.config.to_dict())
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "TransformerModel":
        with np.load(path) as archive:
            if "__config__" not in archive.files:
                raise ValueError(f"{path}: not a model checkpoint (missing __config__)")
            config = ModelConfig.from_dict(_decode_json(archive["__config__"]))
            shapes = _param_shapes(config)
            weights = {}
            for key in archive.files:
                if key == "__config__":
                    continue
                if key not in shapes:
                    raise ValueError(f"{path}: unexpected array {key!r}")
                arr = np.asarray(archive[key], dtype=np.float64)
                if arr.shape != shapes[key]:
                    raise ValueError(
                        f"{path}: array {key!r} has shape {arr.shape}, expected {shapes[key]}")
                weights[key] = T.Tensor(arr)
            missing = sorted(set(shapes) - set(weights))
            if missing:
                raise ValueError(f"{path}: checkpoint missing arrays {missing}")
        return cls(config, weights)


def _encode_json(payload: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(payload, sort_keys=True).encode("utf-8"),
                         dtype=np.uint8).copy()


def _decode_json(arr) -> dict:
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))
