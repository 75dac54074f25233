"""Module criticality via perturbation disagreement.

For each adaptable module, two model instances are created that differ
only in that module: each adds Gaussian noise whose std matches the
module's own weight std.  The l1 distance between their logits, averaged
over independent trials, is the module's disagreement score.  Higher
scores mark modules whose weights the output is most sensitive to.

Noise substreams are keyed by (kind, layer, trial, instance), never by
execution order, so scoring a subset of modules, reordering the module
list, or parallelizing trials cannot change any score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._version import __version__
from .model import KIND_ORDER, ModuleKind, ModulePath
from .rng import RngStream, StreamTag, gaussian
from .tensor import l1_diff, population_std


@dataclass
class PerturbationConfig:
    trials: int = 5
    master_seed: int = 0
    noise_multiplier: float = 1.0
    normalize_per_sample: bool = False

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")


class ScoreVector:
    """Ordered map module path -> nonnegative disagreement rate."""

    def __init__(self, scores: dict, seed: int = 0, trials: int = 1,
                 noise_multiplier: float = 1.0):
        if not scores:
            raise ValueError("score vector is empty")
        ordered = {}
        for path in sorted(scores, key=lambda p: (KIND_ORDER.index(p.kind), p.layer)):
            value = float(scores[path])
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"score for {path} must be finite and >= 0, got {value}")
            ordered[path] = value
        self.scores = ordered
        self.seed = seed
        self.trials = trials
        self.noise_multiplier = noise_multiplier

    def __len__(self):
        return len(self.scores)

    def __iter__(self):
        return iter(self.scores.items())

    def paths(self) -> list:
        return list(self.scores)

    def values(self) -> np.ndarray:
        return np.array(list(self.scores.values()))

    def kinds(self) -> list:
        seen = []
        for path in self.scores:
            if path.kind not in seen:
                seen.append(path.kind)
        return seen

    def restrict(self, kind: ModuleKind) -> "ScoreVector":
        subset = {p: v for p, v in self.scores.items() if p.kind is kind}
        if not subset:
            raise ValueError(f"no scores for kind {kind.value}")
        return ScoreVector(subset, seed=self.seed, trials=self.trials,
                           noise_multiplier=self.noise_multiplier)

    def by_kind(self) -> dict:
        grouped = {}
        for path, value in self.scores.items():
            grouped.setdefault(path.kind, {})[path.layer] = value
        out = {}
        for kind in KIND_ORDER:
            if kind not in grouped:
                continue
            layers = grouped[kind]
            if sorted(layers) != list(range(len(layers))):
                raise ValueError(
                    f"{kind.value} scores must cover layers 0..{len(layers) - 1} with no gaps")
            out[kind.value] = [layers[i] for i in range(len(layers))]
        return out

    # --- serialization ------------------------------------------------------

    def to_payload(self) -> dict:
        return {
            "version": __version__,
            "seed": self.seed,
            "trials": self.trials,
            "noise_multiplier": self.noise_multiplier,
            "scores": self.by_kind(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "ScoreVector":
        try:
            raw = payload["scores"]
            seed = int(payload["seed"])
            trials = int(payload["trials"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed score file: {exc}") from None
        scores = {}
        for kind_name, per_layer in raw.items():
            kind = ModuleKind(kind_name)
            for layer, value in enumerate(per_layer):
                scores[ModulePath(kind, layer)] = float(value)
        return cls(scores, seed=seed, trials=trials,
                   noise_multiplier=float(payload.get("noise_multiplier", 1.0)))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_payload(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ScoreVector":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_payload(json.load(fh))


def perturb_instance(model, path: ModulePath, stream: RngStream,
                     noise_multiplier: float = 1.0) -> np.ndarray:
    """W + delta for one module, delta ~ N(0, noise_multiplier * std(W)).

    A zero-variance weight tensor (std 0) comes back unchanged.
    """
    w = model.get_weights(path)
    std = noise_multiplier * population_std(w)
    return w + gaussian(w.shape, 0.0, std, stream)


def pair_disagreement(model, path: ModulePath, batch, stream_a: RngStream,
                      stream_b: RngStream, noise_multiplier: float = 1.0) -> float:
    """l1 distance between logits of two singly-perturbed instances.

    The model is returned to its exact original weights before this
    function exits; only the targeted tensor is ever touched.
    """
    original = model.get_weights(path)
    # draw both before touching the model so neither sees the other's noise
    perturbed_a = perturb_instance(model, path, stream_a, noise_multiplier)
    perturbed_b = perturb_instance(model, path, stream_b, noise_multiplier)
    try:
        model.set_weights(path, perturbed_a)
        logits_a = model.forward(batch).data.copy()
        model.set_weights(path, perturbed_b)
        logits_b = model.forward(batch).data
    finally:
        model.set_weights(path, original)
    return l1_diff(logits_a, logits_b)


def score_modules(model, paths, batch, cfg: PerturbationConfig) -> ScoreVector:
    """Mean pair disagreement over cfg.trials independent trials per module."""
    paths = list(paths)
    if not paths:
        raise ValueError("paths must be nonempty")
    base = RngStream(cfg.master_seed, StreamTag.SCORING)
    n_samples = len(batch)
    scores = {}
    for path in paths:
        kind_index = KIND_ORDER.index(path.kind)
        total = 0.0
        for trial in range(cfg.trials):
            stream_a = base.substream(kind_index, path.layer, trial, 0)
            stream_b = base.substream(kind_index, path.layer, trial, 1)
            total += pair_disagreement(model, path, batch, stream_a, stream_b,
                                       cfg.noise_multiplier)
        score = total / cfg.trials
        if cfg.normalize_per_sample:
            score /= n_samples
        scores[path] = score
    return ScoreVector(scores, seed=cfg.master_seed, trials=cfg.trials,
                       noise_multiplier=cfg.noise_multiplier)
