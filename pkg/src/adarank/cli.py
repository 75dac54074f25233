"""Command-line workbench: score modules, build/validate plans, train, compare.

Exit codes: 0 success, 1 validation or input failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from ._version import __version__
from .allocation import (joint_ranks, random_scores, ranks_from_scores,
                         separate_ranks, validate_plan)
from .data import (Corpus, Tokenizer, generic_corpus, in_domain_sentences,
                   load_corpus, load_csv)
from .harness import (ALL_MODES, DEFAULT_MODES, TrainConfig, compare, finetune)
from .lora import (BERT_BASE_NONHEAD_PARAMS, RankPlan, trainable_param_count)
from .model import (KIND_ORDER, ModelConfig, TransformerModel, list_modules,
                    parse_kind)
from .rng import RngStream, StreamTag
from .scoring import PerturbationConfig, ScoreVector, score_modules

_ZIP_MAGIC = b"PK\x03\x04"


def _parse_config_text(path) -> dict:
    """Flat key=value lines; blank lines and # comments ignored."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: line {lineno}: expected key=value, got {raw!r}")
            values[key.strip()] = value.strip()
    return values


def _coerce_config_values(values: dict) -> dict:
    coerced = {}
    for key, value in values.items():
        if key in ("init_std", "ln_eps"):
            coerced[key] = float(value)
        else:
            coerced[key] = int(value)
    return coerced


def load_model_arg(path, overrides=None, model_seed: int = 0):
    """A --model argument is either an .npz checkpoint or a key=value config."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == _ZIP_MAGIC:
        if overrides:
            raise ValueError("--set overrides apply to config files, not checkpoints")
        model = TransformerModel.load(path)
        return model.config, model
    values = _parse_config_text(path)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    config = ModelConfig.from_dict(_coerce_config_values(values))
    return config, TransformerModel.build(config, model_seed)


def _parse_kinds(text):
    kinds = [parse_kind(part) for part in text.split(",") if part.strip()]
    if not kinds:
        raise ValueError("--kinds must name at least one module kind")
    return kinds


def _parse_seeds(text):
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ValueError("--seeds must name at least one seed")
    return seeds


def _scoring_corpus(args, seed: int) -> Corpus:
    if getattr(args, "scoring_text", None):
        return load_corpus(args.scoring_text)
    if getattr(args, "in_domain", None):
        dataset = load_csv(args.in_domain)
        return in_domain_sentences(dataset, seed=seed)
    return generic_corpus()


# --- subcommands ---------------------------------------------------------------


def cmd_score(args) -> int:
    config, model = load_model_arg(args.model, args.set, args.model_seed)
    kinds = _parse_kinds(args.kinds)
    paths = list_modules(config, kinds)
    corpus = _scoring_corpus(args, args.seed)
    tokenizer = Tokenizer(config.vocab_size)
    batch = tokenizer.encode_batch(corpus.sentences, config.max_seq_len)
    cfg = PerturbationConfig(trials=args.trials, master_seed=args.seed,
                             noise_multiplier=args.noise_multiplier,
                             normalize_per_sample=args.per_sample)
    print(f"scoring {len(paths)} modules on {len(corpus)} sentences, "
          f"{cfg.trials} trials, seed {cfg.master_seed}")
    scores = score_modules(model, paths, batch, cfg)
    scores.save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_plan(args) -> int:
    min_rank = args.min_rank
    if args.random is not None:
        if args.scores:
            raise ValueError("--random and --scores are mutually exclusive")
        kinds = _parse_kinds(args.kinds)
        paths = list_modules(ModelConfig(n_layers=args.random), kinds)
        stream = RngStream(args.seed, StreamTag.RANDOM_SCORES)
        scores = random_scores(paths, stream)
        plan = ranks_from_scores(scores, args.avg_rank, min_rank=min_rank,
                                 provenance="random")
    else:
        if not args.scores:
            raise ValueError("either --scores or --random is required")
        scores = ScoreVector.load(args.scores)
        mode = args.mode
        if mode is None:
            mode = "joint" if len(scores.kinds()) >= 2 else "separate"
        if mode == "joint":
            plan = joint_ranks(scores, args.avg_rank, min_rank=min_rank)
        else:
            plan = separate_ranks(scores, args.avg_rank, min_rank=min_rank)
    plan.save(args.out)
    print(f"wrote {args.out}: {len(plan)} modules, mean rank {plan.mean_rank():.4f}, "
          f"provenance {plan.provenance}")
    return 0


def cmd_validate_plan(args) -> int:
    plan = RankPlan.load(args.plan)
    scores = ScoreVector.load(args.scores) if args.scores else None
    report = validate_plan(plan, scores=scores, target_avg_rank=args.avg_rank)
    print(report.format())
    return 0 if report.ok else 1


def _plan_from_args(args, config) -> RankPlan:
    if (args.plan is None) == (args.uniform_rank is None):
        raise ValueError("exactly one of --plan or --uniform-rank is required")
    if args.plan is not None:
        return RankPlan.load(args.plan)
    kinds = _parse_kinds(args.kinds) if getattr(args, "kinds", None) else None
    return RankPlan.uniform(config, args.uniform_rank, kinds=kinds)


def cmd_train(args) -> int:
    config, model = load_model_arg(args.model, args.set, args.model_seed)
    plan = _plan_from_args(args, config)
    train_ds = load_csv(args.data, num_classes=config.n_classes)
    test_ds = load_csv(args.test, num_classes=config.n_classes, split="test")
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                      epochs=args.epochs, seed=args.seed)
    result = finetune(model, plan, train_ds, test_ds, cfg)
    payload = result.to_payload()
    payload["train_config"] = {"learning_rate": cfg.learning_rate,
                               "batch_size": cfg.batch_size,
                               "epochs": cfg.epochs, "seed": cfg.seed,
                               "model_seed": args.model_seed}
    payload["plan"] = plan.to_payload()
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    auc = "n/a" if result.auc is None else f"{100.0 * result.auc:.2f}"
    print(f"train acc {100.0 * result.train_accuracy:.2f}  "
          f"test acc {100.0 * result.test_accuracy:.2f}  auc {auc}  "
          f"({result.trainable_params} trainable params, "
          f"{result.wall_clock_seconds:.1f}s)")
    print(f"wrote {args.out}")
    return 0


def cmd_compare(args) -> int:
    config, _ = load_model_arg(args.model, args.set, args.model_seed)
    train_ds = load_csv(args.data, num_classes=config.n_classes)
    test_ds = load_csv(args.test, num_classes=config.n_classes, split="test")
    seeds = _parse_seeds(args.seeds)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    corpus = None
    if args.scoring_text or args.in_domain:
        corpus = _scoring_corpus(args, args.scoring_seed)
    template = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                           epochs=args.epochs)
    started = time.perf_counter()
    report = compare(config, train_ds, test_ds, args.avg_rank, seeds, modes,
                     trials=args.trials, scoring_seed=args.scoring_seed,
                     model_seed=args.model_seed, min_rank=args.min_rank,
                     corpus=corpus, train_template=template)
    report.save_csv(args.out)
    print(report.format_table())
    print(f"wrote {args.out} ({time.perf_counter() - started:.1f}s total)")
    return 0


def cmd_paramcount(args) -> int:
    try:
        n_layers, d_model, d_ff = (int(p) for p in args.dims.lower().split("x"))
    except ValueError:
        raise ValueError(f"--dims expects LxDxF like 12x768x3072, got {args.dims!r}") from None
    config = ModelConfig(n_layers=n_layers, d_model=d_model, d_ff=d_ff, n_heads=1)
    plan = _plan_from_args(args, config)
    layers = {p.layer for p in plan.entries}
    if max(layers) >= n_layers:
        raise ValueError(f"plan uses layer {max(layers)} but --dims has {n_layers} layers")
    params = trainable_param_count(plan, config)
    fraction = 100.0 * params / args.reference_params
    print(f"adapter params: {params}")
    print(f"fraction of reference non-head params ({args.reference_params}): "
          f"{fraction:.4f}%")
    return 0


# --- parser ---------------------------------------------------------------------


def _add_model_args(sub, with_set=True):
    sub.add_argument("--model", required=True,
                     help="model checkpoint (.npz) or key=value config file")
    sub.add_argument("--model-seed", type=int, default=0,
                     help="init seed when --model is a config file")
    if with_set:
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adarank",
        description="Perturbation-disagreement rank planning for LoRA finetuning.")
    parser.add_argument("--version", action="version", version=f"adarank {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("score", help="score module criticality by perturbation disagreement")
    _add_model_args(p)
    p.add_argument("--kinds", default="q,k,v,d", help="comma list: q,k,v,d")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-multiplier", type=float, default=1.0)
    p.add_argument("--per-sample", action="store_true",
                   help="divide scores by the number of scoring sentences")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--scoring-text", help="text file, one sentence per line")
    group.add_argument("--in-domain", metavar="DATASET.csv",
                       help="score on 10 sentences sampled from this dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = subs.add_parser("plan", help="convert scores into an integer rank plan")
    p.add_argument("--scores", help="scores JSON from the score command")
    p.add_argument("--avg-rank", type=float, required=True)
    p.add_argument("--mode", choices=("joint", "separate"),
                   help="default: joint when >=2 kinds are scored")
    p.add_argument("--min-rank", type=int, default=0)
    p.add_argument("--random", type=int, metavar="N",
                   help="ablation: N layers of Uniform[0,1) scores instead of --scores")
    p.add_argument("--kinds", default="q,k,v,d",
                   help="kinds covered by --random (comma list)")
    p.add_argument("--seed", type=int, default=0, help="seed for --random")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = subs.add_parser("validate-plan", help="check a plan's budget and formula")
    p.add_argument("--plan", required=True)
    p.add_argument("--avg-rank", type=float, default=None,
                   help="budget to check against (default: the plan's own)")
    p.add_argument("--scores", help="optional scores JSON for monotonicity/reproduction")
    p.set_defaults(func=cmd_validate_plan)

    p = subs.add_parser("train", help="finetune adapters + head under one plan")
    _add_model_args(p)
    p.add_argument("--plan")
    p.add_argument("--uniform-rank", type=int)
    p.add_argument("--kinds", help="kinds for --uniform-rank (default all four)")
    p.add_argument("--data", required=True, metavar="TRAIN.csv")
    p.add_argument("--test", required=True, metavar="TEST.csv")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="RESULT.json")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("compare", help="pit rank plans against each other at one budget")
    _add_model_args(p)
    p.add_argument("--data", required=True, metavar="TRAIN.csv")
    p.add_argument("--test", required=True, metavar="TEST.csv")
    p.add_argument("--avg-rank", type=float, required=True)
    p.add_argument("--seeds", default="1,2,3", help="comma list of training seeds")
    p.add_argument("--modes", default=",".join(DEFAULT_MODES),
                   help=f"comma list from: {','.join(ALL_MODES)}")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--scoring-seed", type=int, default=0)
    p.add_argument("--min-rank", type=int, default=0)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--scoring-text", help="text file, one sentence per line")
    group.add_argument("--in-domain", metavar="DATASET.csv",
                       help="score on 10 sentences sampled from this dataset")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--out", required=True, metavar="REPORT.csv")
    p.set_defaults(func=cmd_compare)

    p = subs.add_parser("paramcount", help="adapter parameter arithmetic at given dims")
    p.add_argument("--dims", required=True, metavar="LxDxF", help="e.g. 12x768x3072")
    p.add_argument("--plan")
    p.add_argument("--uniform-rank", type=int)
    p.add_argument("--kinds", help="kinds for --uniform-rank (default all four)")
    p.add_argument("--reference-params", type=int, default=BERT_BASE_NONHEAD_PARAMS,
                   help="non-head denominator for the percentage")
    p.set_defaults(func=cmd_paramcount)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
