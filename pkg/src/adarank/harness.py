"""Finetuning loop, evaluation, grid search, and plan-vs-plan comparisons.

Comparison reports are fully deterministic: identical configs and seeds
reproduce byte-identical CSV output.  Wall-clock timings are kept on the
result objects but never written into the CSV for that reason.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from . import tensor as T
from ._version import __version__
from .allocation import joint_ranks, random_scores, ranks_from_scores, separate_ranks
from .data import Dataset, Tokenizer, generic_corpus
from .lora import RankPlan, attach, trainable_param_count
from .metrics import accuracy, binary_auc
from .model import InputBatch, ModelConfig, TransformerModel, list_modules
from .rng import RngStream, StreamTag
from .scoring import PerturbationConfig, score_modules

EVAL_BATCH = 256

DEFAULT_MODES = ("uniform", "adarank-joint")
ALL_MODES = ("uniform", "adarank-joint", "adarank-separate", "random")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")

    def describe(self) -> str:
        return (f"learning_rate={self.learning_rate:g} batch_size={self.batch_size} "
                f"epochs={self.epochs} seed={self.seed}")


class Adam:
    """Adam over a fixed, ordered dict of named tensors."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = list(params.items())
        self.cfg = cfg
        self.m = {name: np.zeros(t.data.size) for name, t in self.params}
        self.v = {name: np.zeros(t.data.size) for name, t in self.params}
        self.t = 0

    def zero_grad(self):
        for _, tensor in self.params:
            tensor.grad = None

    def step(self):
        self.t += 1
        c = self.cfg
        for name, tensor in self.params:
            if tensor.grad is None:
                continue
            grad = np.ascontiguousarray(tensor.grad, dtype=np.float64).reshape(-1)
            kernels.adam_update(tensor.data.reshape(-1), grad,
                                self.m[name], self.v[name],
                                c.learning_rate, c.beta1, c.beta2, c.adam_eps, self.t)


@dataclass
class RunResult:
    seed: int
    train_accuracy: float
    test_accuracy: float
    auc: float | None
    loss_curve: list
    trainable_params: int
    adapter_params: int
    wall_clock_seconds: float
    provenance: str = "manual"

    @property
    def final_loss(self):
        return self.loss_curve[-1] if self.loss_curve else None

    def to_payload(self) -> dict:
        return {
            "version": __version__,
            "seed": self.seed,
            "provenance": self.provenance,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "auc": self.auc,
            "loss_curve": list(self.loss_curve),
            "trainable_params": self.trainable_params,
            "adapter_params": self.adapter_params,
            "wall_clock_seconds": self.wall_clock_seconds,
        }


def _encode_dataset(dataset: Dataset, config: ModelConfig) -> InputBatch:
    tokenizer = Tokenizer(config.vocab_size)
    batch = tokenizer.encode_batch(dataset.texts, config.max_seq_len,
                                   labels=dataset.labels)
    batch.validate(config)
    return batch


def evaluate(model, dataset: Dataset, with_auc: bool | None = None) -> dict:
    """Accuracy and (for binary tasks) rank-sum AUC over the whole dataset.

    ``with_auc=None`` computes AUC when the model has 2 classes and the
    split actually contains both (tiny validation splits may not);
    explicitly requesting it on a non-binary head is an error.
    """
    config = model.config
    binary = config.n_classes == 2
    if with_auc is None:
        with_auc = binary and np.unique(dataset.labels).size == 2
    elif with_auc and not binary:
        raise ValueError(f"AUC requires exactly 2 classes, model has {config.n_classes}")
    encoded = _encode_dataset(dataset, config)
    logits = np.empty((len(dataset), config.n_classes))
    for start in range(0, len(dataset), EVAL_BATCH):
        stop = min(start + EVAL_BATCH, len(dataset))
        part = InputBatch(encoded.ids[start:stop])
        logits[start:stop] = model.forward(part).data
    labels = dataset.labels
    predictions = logits.argmax(axis=1)
    metrics = {"accuracy": accuracy(predictions, labels), "auc": None}
    if with_auc:
        class1 = kernels.softmax(np.ascontiguousarray(logits))[:, 1]
        metrics["auc"] = binary_auc(class1, labels)
    return metrics


def finetune(model: TransformerModel, plan: RankPlan, train_dataset: Dataset,
             test_dataset: Dataset, cfg: TrainConfig) -> RunResult:
    """Train adapters + head on the train split; report metrics on both splits.

    The passed-in base model is never mutated; training happens on a
    private adapted copy.
    """
    start_time = time.perf_counter()
    config = model.config
    adapted = attach(model, plan, RngStream(cfg.seed, StreamTag.LORA_INIT))
    encoded = _encode_dataset(train_dataset, config)
    labels = train_dataset.labels
    optimizer = Adam(adapted.trainable(), cfg)
    shuffle = RngStream(cfg.seed, StreamTag.SHUFFLE)
    n = len(train_dataset)

    loss_curve = []
    for epoch in range(cfg.epochs):
        order = shuffle.substream(epoch).permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = InputBatch(encoded.ids[idx], labels[idx])
            with T.GradTape() as tape:
                logits = adapted.forward(batch)
                loss = T.softmax_cross_entropy(logits, batch.labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(
                    f"training diverged: loss {value} at epoch {epoch} ({cfg.describe()})")
            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step()
            epoch_loss += value * len(idx)
        loss_curve.append(epoch_loss / n)

    train_metrics = evaluate(adapted, train_dataset)
    test_metrics = evaluate(adapted, test_dataset)
    return RunResult(
        seed=cfg.seed,
        train_accuracy=train_metrics["accuracy"],
        test_accuracy=test_metrics["accuracy"],
        auc=test_metrics["auc"],
        loss_curve=loss_curve,
        trainable_params=adapted.trainable_param_count(),
        adapter_params=trainable_param_count(plan, config),
        wall_clock_seconds=time.perf_counter() - start_time,
        provenance=plan.provenance,
    )


def grid_search(config: ModelConfig, dataset: Dataset, plan: RankPlan, space,
                model_seed: int = 0, split_seed: int = 0) -> TrainConfig:
    """Exhaustive search over candidate TrainConfigs on a 10% validation split.

    Diverging candidates are skipped; ties break toward the lower learning
    rate, then the smaller batch size.
    """
    space = list(space)
    if not space:
        raise ValueError("grid is empty")
    n = len(dataset)
    n_val = max(1, round(0.1 * n))
    if n_val >= n:
        raise ValueError("dataset too small for a validation split")
    order = RngStream(split_seed, StreamTag.SPLIT).permutation(n)
    val = Dataset([dataset.records[i] for i in order[:n_val]],
                  name=f"{dataset.name}-val", split="test")
    fit = Dataset([dataset.records[i] for i in order[n_val:]],
                  name=f"{dataset.name}-fit", split="train")
    base = TransformerModel.build(config, model_seed)

    best_key, best_cfg = None, None
    for candidate in space:
        try:
            result = finetune(base, plan, fit, val, candidate)
            score = result.test_accuracy
        except RuntimeError:
            score = float("-inf")  # diverged; never preferred
        key = (-score, candidate.learning_rate, candidate.batch_size)
        if best_key is None or key < best_key:
            best_key, best_cfg = key, candidate
    return best_cfg


# --- comparisons --------------------------------------------------------------


def build_plan(mode: str, config: ModelConfig, target_avg_rank: float,
               scores=None, min_rank: int = 0, scoring_seed: int = 0) -> RankPlan:
    if mode == "uniform":
        if not float(target_avg_rank).is_integer():
            raise ValueError("uniform baseline needs an integer average rank")
        return RankPlan.uniform(config, int(target_avg_rank))
    if mode == "adarank-joint":
        return joint_ranks(scores, target_avg_rank, min_rank=min_rank)
    if mode == "adarank-separate":
        return separate_ranks(scores, target_avg_rank, min_rank=min_rank)
    if mode == "random":
        rand = random_scores(list_modules(config),
                             RngStream(scoring_seed, StreamTag.RANDOM_SCORES))
        return ranks_from_scores(rand, target_avg_rank, min_rank=min_rank,
                                 provenance="random")
    raise ValueError(f"unknown mode {mode!r}; choose from {ALL_MODES}")


@dataclass
class ComparisonRow:
    mode: str
    result: RunResult
    mean_rank: float


@dataclass
class ComparisonReport:
    target_avg_rank: float
    seeds: list
    modes: list
    rows: list
    plans: dict

    def rows_for(self, mode: str) -> list:
        return [r for r in self.rows if r.mode == mode]

    def mode_mean(self, mode: str, attr: str):
        values = [getattr(r.result, attr) for r in self.rows_for(mode)]
        if any(v is None for v in values):
            return None
        return float(np.mean(values))

    def _table_rows(self):
        """(mode, seed_label, result-ish dict) rows: per-seed rows then a mean row."""
        out = []
        for mode in self.modes:
            per_seed = self.rows_for(mode)
            for row in per_seed:
                out.append((mode, str(row.result.seed), row.mean_rank, row.result))
            mean = RunResult(
                seed=-1,
                train_accuracy=self.mode_mean(mode, "train_accuracy"),
                test_accuracy=self.mode_mean(mode, "test_accuracy"),
                auc=self.mode_mean(mode, "auc"),
                loss_curve=[self.mode_mean(mode, "final_loss")]
                if per_seed[0].result.loss_curve else [],
                trainable_params=per_seed[0].result.trainable_params,
                adapter_params=per_seed[0].result.adapter_params,
                wall_clock_seconds=0.0,
                provenance=per_seed[0].result.provenance,
            )
            out.append((mode, "mean", per_seed[0].mean_rank, mean))
        return out

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["mode", "seed", "mean_rank", "adapter_params",
                         "trainable_params", "train_acc_pct", "test_acc_pct",
                         "auc_pct", "final_loss"])
        for mode, seed_label, mean_rank, res in self._table_rows():
            writer.writerow([
                mode,
                seed_label,
                f"{mean_rank:.4f}",
                res.adapter_params,
                res.trainable_params,
                f"{100.0 * res.train_accuracy:.2f}",
                f"{100.0 * res.test_accuracy:.2f}",
                "" if res.auc is None else f"{100.0 * res.auc:.2f}",
                "" if res.final_loss is None else f"{res.final_loss:.6f}",
            ])
        return buf.getvalue()

    def save_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.csv_text())

    def format_table(self) -> str:
        header = ["mode", "seed", "mean_rank", "adapter_params",
                  "train_acc%", "test_acc%", "auc%"]
        body = []
        for mode, seed_label, mean_rank, res in self._table_rows():
            body.append([
                mode, seed_label, f"{mean_rank:.4f}", str(res.adapter_params),
                f"{100.0 * res.train_accuracy:.2f}",
                f"{100.0 * res.test_accuracy:.2f}",
                "-" if res.auc is None else f"{100.0 * res.auc:.2f}",
            ])
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        lines = [f"target average rank: {self.target_avg_rank:g}   "
                 f"seeds: {','.join(str(s) for s in self.seeds)}"]
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        for row in body:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
        return "\n".join(lines)


def compare(config: ModelConfig, train_dataset: Dataset, test_dataset: Dataset,
            target_avg_rank: float, seeds, modes=DEFAULT_MODES, *,
            trials: int = 5, scoring_seed: int = 0, model_seed: int = 0,
            min_rank: int = 0, corpus=None,
            train_template: TrainConfig | None = None) -> ComparisonReport:
    """Score once, build one plan per mode, finetune each over all seeds."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("seeds must be nonempty")
    modes = list(modes)
    for mode in modes:
        if mode not in ALL_MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {ALL_MODES}")
    template = train_template if train_template is not None else TrainConfig()

    model = TransformerModel.build(config, model_seed)
    scores = None
    if any(m.startswith("adarank") for m in modes):
        sentences = (corpus if corpus is not None else generic_corpus()).sentences
        tokenizer = Tokenizer(config.vocab_size)
        batch = tokenizer.encode_batch(sentences, config.max_seq_len)
        scores = score_modules(model, list_modules(config), batch,
                               PerturbationConfig(trials=trials, master_seed=scoring_seed))

    plans = {mode: build_plan(mode, config, target_avg_rank, scores=scores,
                              min_rank=min_rank, scoring_seed=scoring_seed)
             for mode in modes}

    rows = []
    for mode in modes:
        plan = plans[mode]
        for seed in seeds:
            cfg = replace(template, seed=seed)
            result = finetune(model, plan, train_dataset, test_dataset, cfg)
            rows.append(ComparisonRow(mode=mode, result=result,
                                      mean_rank=plan.mean_rank()))
    return ComparisonReport(target_avg_rank=float(target_avg_rank), seeds=seeds,
                            modes=modes, rows=rows, plans=plans)
