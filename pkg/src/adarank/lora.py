"""Low-rank adapters with per-module ranks, parameter accounting, merging.

A rank plan assigns every adaptable module an integer rank; rank 0 means
the module stays frozen with no adapter.  Attaching adapters never
changes model outputs until training moves B away from zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from ._version import __version__
from .model import (KIND_ORDER, ModelConfig, ModuleKind, ModulePath,
                    TransformerModel, list_modules)
from .rng import RngStream, gaussian

PROVENANCES = ("adarank-separate", "adarank-joint", "uniform", "random", "manual")

# Reference denominator for parameter-fraction reporting at full scale:
# bert-base-cased without the task head.  Breakdown (vocab 28996, 12 layers,
# hidden 768, intermediate 3072, 512 positions, 2 token types, incl. pooler):
#   embeddings 22,665,216 + encoder 12 x 7,087,872 + pooler 590,592
BERT_BASE_NONHEAD_PARAMS = 108_310_272


@dataclass
class RankPlan:
    """Ordered map of module path -> rank, plus how the plan was produced."""

    entries: dict
    target_avg_rank: float
    provenance: str = "manual"
    min_rank: int = 0
    seed: int | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        if not self.entries:
            raise ValueError("plan has no entries")
        if float(self.target_avg_rank) <= 0:
            raise ValueError("target_avg_rank must be positive")
        clean = {}
        for path, rank in self.entries.items():
            if not isinstance(path, ModulePath):
                path = ModulePath.parse(str(path))
            rank = int(rank)
            if rank < 0:
                raise ValueError(f"negative rank for {path}")
            clean[path] = rank
        # kind-major canonical order regardless of insertion order
        self.entries = {p: clean[p] for p in sorted(
            clean, key=lambda p: (KIND_ORDER.index(p.kind), p.layer))}

    def __len__(self):
        return len(self.entries)

    def rank_for(self, path: ModulePath) -> int:
        return self.entries.get(path, 0)

    def kinds(self) -> list:
        seen = []
        for path in self.entries:
            if path.kind not in seen:
                seen.append(path.kind)
        return seen

    def mean_rank(self) -> float:
        return sum(self.entries.values()) / len(self.entries)

    def ranks_by_kind(self) -> dict:
        """Per-kind rank lists indexed by layer; layers must be contiguous from 0."""
        grouped = {}
        for path, rank in self.entries.items():
            grouped.setdefault(path.kind, {})[path.layer] = rank
        out = {}
        for kind in KIND_ORDER:
            if kind not in grouped:
                continue
            layers = grouped[kind]
            if sorted(layers) != list(range(len(layers))):
                raise ValueError(
                    f"{kind.value} ranks must cover layers 0..{len(layers) - 1} with no gaps")
            out[kind.value] = [layers[i] for i in range(len(layers))]
        return out

    @classmethod
    def uniform(cls, config: ModelConfig, rank: int, kinds=None) -> "RankPlan":
        if int(rank) < 0:
            raise ValueError("uniform rank must be >= 0")
        entries = {path: int(rank) for path in list_modules(config, kinds)}
        # a rank-0 plan (head-only training) still needs a positive budget field
        target = float(rank) if rank > 0 else 1.0
        return cls(entries, target_avg_rank=target, provenance="uniform")

    # --- serialization ------------------------------------------------------

    def to_payload(self) -> dict:
        return {
            "version": __version__,
            "target_avg_rank": float(self.target_avg_rank),
            "provenance": self.provenance,
            "min_rank": int(self.min_rank),
            "seed": self.seed,
            "ranks": self.ranks_by_kind(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "RankPlan":
        try:
            ranks = payload["ranks"]
            target = float(payload["target_avg_rank"])
            provenance = payload.get("provenance", "manual")
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed rank plan: {exc}") from None
        entries = {}
        for kind_name, per_layer in ranks.items():
            kind = ModuleKind(kind_name)
            for layer, rank in enumerate(per_layer):
                entries[ModulePath(kind, layer)] = int(rank)
        return cls(entries, target_avg_rank=target, provenance=provenance,
                   min_rank=int(payload.get("min_rank", 0)),
                   seed=payload.get("seed"))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_payload(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RankPlan":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_payload(json.load(fh))


class LoraAdapter:
    """Factor pair for one module: update = scale * A @ B, B starts at zero."""

    def __init__(self, path: ModulePath, a: np.ndarray, b: np.ndarray, scale: float = 1.0):
        if a.shape[1] != b.shape[0] or a.shape[1] < 1:
            raise ValueError(f"factor shapes incompatible: {a.shape} @ {b.shape}")
        self.path = path
        self.rank = a.shape[1]
        self.a = T.Tensor(a, requires_grad=True)
        self.b = T.Tensor(b, requires_grad=True)
        self.scale = float(scale)

    @classmethod
    def create(cls, path: ModulePath, d_in: int, d_out: int, rank: int,
               stream: RngStream, init_std: float = 0.02, scale: float = 1.0):
        if rank < 1:
            raise ValueError("adapter rank must be >= 1 (rank 0 means no adapter)")
        a = gaussian((d_in, rank), 0.0, init_std, stream)
        b = np.zeros((rank, d_out))
        return cls(path, a, b, scale)

    def contribution(self, x2d: T.Tensor) -> T.Tensor:
        y = T.matmul(T.matmul(x2d, self.a), self.b)
        if self.scale != 1.0:
            y = T.scale(y, self.scale)
        return y

    def delta(self) -> np.ndarray:
        return self.scale * (self.a.data @ self.b.data)

    def param_count(self) -> int:
        return self.a.data.size + self.b.data.size


class AdaptedModel:
    """A private copy of a model with adapters on the planned modules.

    Trainable tensors are exactly the adapter factors plus the head; the
    copied base weights stay frozen for the lifetime of the object.
    """

    def __init__(self, model: TransformerModel, plan: RankPlan, adapters: dict):
        self.model = model
        self.plan = plan
        self.adapters = adapters
        self._merged = False
        for tensor in self._head_tensors().values():
            tensor.requires_grad = True

    @property
    def config(self):
        return self.model.config

    def _head_tensors(self) -> dict:
        return {"head.weight": self.model.weights["head.weight"],
                "head.bias": self.model.weights["head.bias"]}

    def trainable(self) -> dict:
        """name -> Tensor for every parameter the optimizer may touch."""
        out = {}
        for path, adapter in self.adapters.items():
            out[f"lora.{path}.A"] = adapter.a
            out[f"lora.{path}.B"] = adapter.b
        out.update(self._head_tensors())
        return out

    def forward(self, batch) -> T.Tensor:
        return self.model.forward(batch, adapters=self.adapters)

    def trainable_param_count(self) -> int:
        adapters = sum(ad.param_count() for ad in self.adapters.values())
        head = sum(t.data.size for t in self._head_tensors().values())
        return adapters + head

    def merge(self) -> TransformerModel:
        """Fold every adapter update into its base weight; single use."""
        if self._merged:
            raise RuntimeError("already merged")
        self._merged = True
        for path, adapter in self.adapters.items():
            w = self.model.weights[path.weight_key]
            w.data = w.data + adapter.delta()
        for tensor in self._head_tensors().values():
            tensor.requires_grad = False
        return self.model


def attach(model: TransformerModel, plan: RankPlan, stream: RngStream,
           init_std: float = 0.02, scale: float = 1.0) -> AdaptedModel:
    """Copy the model and attach adapters per the plan; rank 0 entries get none.

    Adapter A factors draw from substreams keyed by (kind, layer), so a
    module's init does not depend on which other modules carry adapters.
    """
    known = set(list_modules(model.config))
    unknown = [p for p in plan.entries if p not in known]
    if unknown:
        raise ValueError(f"plan refers to unknown modules: "
                         f"{', '.join(str(p) for p in unknown)}")
    copied = model.copy()
    adapters = {}
    for path, rank in plan.entries.items():
        if rank == 0:
            continue
        d_in, d_out = model.config.module_shape(path.kind)
        sub = stream.substream(KIND_ORDER.index(path.kind), path.layer)
        adapters[path] = LoraAdapter.create(path, d_in, d_out, rank, sub,
                                            init_std=init_std, scale=scale)
    return AdaptedModel(copied, plan, adapters)


def merge(adapted: AdaptedModel) -> TransformerModel:
    return adapted.merge()


def trainable_param_count(plan: RankPlan, config: ModelConfig) -> int:
    """Adapter parameters implied by the plan: sum of rank * (d_in + d_out).

    The always-trainable head is excluded, matching how parameter
    fractions are quoted against non-head totals.
    """
    total = 0
    for path, rank in plan.entries.items():
        d_in, d_out = config.module_shape(path.kind)
        total += rank * (d_in + d_out)
    return total


def head_param_count(config: ModelConfig) -> int:
    return config.d_model * config.n_classes + config.n_classes
