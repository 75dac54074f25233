"""Acceptance gate: one test per criterion, one printed PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines inline.
Criterion 7 asserts every documented clause including the parameter-budget
comparison for the joint plan, which fails on this architecture (see the
criterion's docstring); the test is intentionally left red rather than
weakened.
"""

import csv
import hashlib
import io
import time
from contextlib import redirect_stdout

import numpy as np
import pytest
from _oracles import (
    PUBLISHED_RANDOM,
    PUBLISHED_SEPARATE,
    boundary_safe_scores,
    exact_ranks,
)

from adarank import tensor as T
from adarank.allocation import ranks_from_scores, validate_plan
from adarank.cli import main
from adarank.data import save_csv, synthetic_dataset
from adarank.lora import RankPlan, attach, merge
from adarank.model import (
    InputBatch,
    ModelConfig,
    ModuleKind,
    ModulePath,
    TransformerModel,
    list_modules,
)
from adarank.rng import RngStream, StreamTag, gaussian
from adarank.scoring import (
    PerturbationConfig,
    pair_disagreement,
    perturb_instance,
    score_modules,
)
from adarank.scoring import ScoreVector
from adarank.tensor import l1_diff, population_std


def _line(num: int, ok: bool, detail: str):
    print(f"[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}")


def _score_vector(values):
    return ScoreVector({ModulePath(ModuleKind.QUERY, i): float(v)
                        for i, v in enumerate(values)})


def _instances(count=1000, seed=20240814):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n = int(rng.integers(2, 30))
        r = float(rng.integers(1, 17)) if rng.random() < 0.7 else \
            float(rng.integers(1, 65)) / 4.0
        values = rng.uniform(0.01, 50.0, size=n)
        out.append((values, r))
    return out


INSTANCES = _instances()


def test_criterion_1_oracle_equivalence():
    """ranks_from_scores matches an exact rational-arithmetic oracle."""
    started = time.perf_counter()
    mismatches = 0
    for values, r in INSTANCES:
        got = list(ranks_from_scores(_score_vector(values), r).entries.values())
        if got != exact_ranks(values, r):
            mismatches += 1
    elapsed = time.perf_counter() - started
    ok = mismatches == 0 and elapsed < 5.0
    _line(1, ok, f"{len(INSTANCES)} instances, {mismatches} oracle mismatches, "
                 f"{elapsed:.2f}s (< 5s)")
    assert mismatches == 0
    assert elapsed < 5.0


def test_criterion_2_budget_invariant_and_published_plans():
    """mean(ranks) <= r everywhere; published rank lists validate at r=8."""
    over_budget = 0
    for values, r in INSTANCES:
        plan = ranks_from_scores(_score_vector(values), r)
        if plan.mean_rank() > r + 1e-12:
            over_budget += 1

    published = [(kind, ranks, total) for (kind, ranks), total in
                 zip(PUBLISHED_SEPARATE.items(), (89, 89, 89, 91))]
    published.append(("query", PUBLISHED_RANDOM, 90))
    failed_plans = []
    for kind, ranks, total in published:
        plan = RankPlan.from_payload({"target_avg_rank": 8, "provenance": "manual",
                                      "ranks": {kind: ranks}})
        report = validate_plan(plan, target_avg_rank=8)
        if not report.ok or plan.mean_rank() != pytest.approx(total / 12):
            failed_plans.append(f"{kind} (sum {total})")

    ok = over_budget == 0 and not failed_plans
    _line(2, ok, f"{len(INSTANCES)} instances within budget "
                 f"({over_budget} violations); published plans at r=8: "
                 f"{'all 5 pass' if not failed_plans else 'failed ' + ', '.join(failed_plans)}")
    assert over_budget == 0
    assert not failed_plans


def test_criterion_3_scale_invariance_and_monotonicity():
    """Plans invariant under score rescaling; ranks monotone in scores."""
    rng = np.random.default_rng(3)
    scale_violations = 0
    for _ in range(100):
        n = int(rng.integers(2, 20))
        r = int(rng.integers(1, 13))
        values = boundary_safe_scores(rng, n, r)
        base = ranks_from_scores(_score_vector(values), r).entries
        for c in (1e-3, 7.0, 1e3):
            scaled = ranks_from_scores(_score_vector(values * c), r).entries
            if scaled != base:
                scale_violations += 1

    mono_violations = 0
    for _ in range(100):
        values = rng.uniform(0.01, 10.0, size=int(rng.integers(2, 25)))
        plan = ranks_from_scores(_score_vector(values), 8)
        ranks = np.array(list(plan.entries.values()), dtype=float)
        order = np.argsort(values, kind="stable")
        if np.any(np.diff(ranks[order]) < 0):
            mono_violations += 1

    ok = scale_violations == 0 and mono_violations == 0
    _line(3, ok, f"rescaling c in {{1e-3, 7, 1e3}}: {scale_violations} violations "
                 f"/ 300 plans; monotonicity: {mono_violations} violations / 100")
    assert scale_violations == 0
    assert mono_violations == 0


def test_criterion_4_scoring_soundness():
    """Zero cases are exact, perturbation is isolated, MC matches closed form."""
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32,
                      vocab_size=64, max_seq_len=8)
    model = TransformerModel.build(cfg, 0)
    rng = np.random.default_rng(0)
    batch = InputBatch(rng.integers(0, 64, size=(4, 6)))
    dense1 = ModulePath(ModuleKind.DENSE, 1)
    base = RngStream(0, StreamTag.SCORING)
    same = base.substream(3, 1, 0, 0)

    same_seed_zero = pair_disagreement(model, dense1, batch, same, same) == 0.0

    zero_mult = score_modules(model, list_modules(cfg), batch,
                              PerturbationConfig(trials=1, noise_multiplier=0.0))
    zero_mult_zero = all(v == 0.0 for v in zero_mult.values())

    inst_a, inst_b = model.copy(), model.copy()
    inst_a.set_weights(dense1, perturb_instance(model, dense1, base.substream(3, 1, 0, 0)))
    inst_b.set_weights(dense1, perturb_instance(model, dense1, base.substream(3, 1, 0, 1)))

    def checksums(m):
        return {k: hashlib.sha256(v.tobytes()).hexdigest()
                for k, v in m.all_weights().items()}
    ca, cb = checksums(inst_a), checksums(inst_b)
    differing = [k for k in ca if ca[k] != cb[k]]
    isolated = differing == [dense1.weight_key]

    before = model.fingerprint()
    score_modules(model, list_modules(cfg), batch, PerturbationConfig(trials=2))
    untouched = model.fingerprint() == before

    x = np.random.default_rng(5).normal(size=(4, 12))
    w = np.random.default_rng(6).normal(0, 0.3, size=(12, 6))
    sigma = population_std(w)
    total = 0.0
    trials = 1000
    for t in range(trials):
        da = gaussian(w.shape, 0.0, sigma, base.substream(9, 0, t, 0))
        db = gaussian(w.shape, 0.0, sigma, base.substream(9, 0, t, 1))
        total += l1_diff(x @ (w + da), x @ (w + db))
    observed = total / trials
    expected = (np.sqrt(2 / np.pi) * np.sqrt(2) * sigma * 6
                * np.linalg.norm(x, axis=1).sum())
    mc_err = abs(observed - expected) / expected
    mc_ok = mc_err < 0.02

    ok = same_seed_zero and zero_mult_zero and isolated and untouched and mc_ok
    _line(4, ok, f"same-seed zero {same_seed_zero}, zero-multiplier zero "
                 f"{zero_mult_zero}, single-tensor audit {isolated}, model "
                 f"untouched {untouched}, Monte-Carlo error {100 * mc_err:.2f}% (< 2%)")
    assert same_seed_zero and zero_mult_zero and isolated and untouched
    assert mc_ok


def _run_cli(argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        rc = main(argv)
    return rc, buf.getvalue()


def test_criterion_5_parameter_arithmetic():
    """Adapter counts and non-head fractions at reference encoder dimensions."""
    rc8, out8 = _run_cli(["paramcount", "--dims", "12x768x3072",
                          "--uniform-rank", "8", "--kinds", "q"])
    rc16, out16 = _run_cli(["paramcount", "--dims", "12x768x3072",
                            "--uniform-rank", "16", "--kinds", "q"])

    def parse(text):
        params = int(text.split("adapter params: ")[1].splitlines()[0])
        fraction = float(text.split("): ")[1].rstrip("%\n"))
        return params, fraction

    p8, f8 = parse(out8)
    p16, f16 = parse(out16)
    ok = (rc8 == 0 and rc16 == 0 and p8 == 147_456 and p16 == 294_912
          and abs(f8 - 0.13) <= 0.02 and abs(f16 - 0.26) <= 0.02)
    _line(5, ok, f"rank 8: {p8} params = {f8}% (target 0.13 +/- 0.02pp); "
                 f"rank 16: {p16} params = {f16}% (target 0.26 +/- 0.02pp)")
    assert p8 == 147_456 and abs(f8 - 0.13) <= 0.02
    assert p16 == 294_912 and abs(f16 - 0.26) <= 0.02


def test_criterion_6_lora_correctness():
    """Transparency bitwise, merge within 1e-9, gradients vs finite differences."""
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32,
                      vocab_size=64, max_seq_len=8, n_classes=2)
    model = TransformerModel.build(cfg, 0)
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 64, size=(4, 6))
    labels = rng.integers(0, 2, size=4)
    batch = InputBatch(ids, labels)

    adapted = attach(model, RankPlan.uniform(cfg, 2),
                     RngStream(0, StreamTag.LORA_INIT))
    transparent = np.array_equal(model.forward(batch).data,
                                 adapted.forward(batch).data)

    # push the factors off their init, then fold them in
    for step in range(3):
        params = adapted.trainable()
        for t in params.values():
            t.grad = None
        with T.GradTape() as tape:
            loss = T.softmax_cross_entropy(adapted.forward(batch), labels)
            tape.backward(loss)
        for t in params.values():
            if t.grad is not None:
                t.data = t.data - 0.05 * t.grad
    probes = [InputBatch(rng.integers(0, 64, size=(3, 5))) for _ in range(5)]
    adapted_logits = [adapted.forward(p).data for p in probes]
    merged = merge(adapted)
    merge_err = max(np.abs(merged.forward(p).data - expect).max()
                    for p, expect in zip(probes, adapted_logits))
    merge_ok = merge_err < 1e-9

    fresh = attach(model, RankPlan.uniform(cfg, 2), RngStream(1, StreamTag.LORA_INIT))
    params = fresh.trainable()
    for t in params.values():
        t.grad = None
    with T.GradTape() as tape:
        loss = T.softmax_cross_entropy(fresh.forward(batch), labels)
        tape.backward(loss)

    def loss_at():
        logits = fresh.forward(batch).data
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        return float(np.mean(lse - logits[np.arange(len(labels)), labels]))

    h = 1e-5
    worst = 0.0
    checked = 0
    for tensor in params.values():
        grad = tensor.grad
        assert grad is not None
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_at()
            flat[i] = orig - h
            lo = loss_at()
            flat[i] = orig
            fd = (hi - lo) / (2 * h)
            err = abs(grad.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
            checked += 1
    grads_ok = worst < 1e-6

    ok = transparent and merge_ok and grads_ok
    _line(6, ok, f"transparency bitwise {transparent}; merge max err "
                 f"{merge_err:.2e} (< 1e-9); finite differences on {checked} "
                 f"coordinates, worst rel err {worst:.2e} (< 1e-6)")
    assert transparent
    assert merge_ok
    assert grads_ok


DESK_CONFIG = """\
n_layers = 4
d_model = 64
n_heads = 4
d_ff = 128
vocab_size = 8192
max_seq_len = 64
n_classes = 4
"""


def test_criterion_7_desk_scale_end_to_end(tmp_path):
    """Accuracy and runtime clauses hold; the budget clause does not.

    Joint allocation moves rank toward value/dense modules, whose larger
    fan-out (d_ff) makes the per-rank parameter cost higher than the
    uniform baseline's, so the joint plan exceeds the uniform parameter
    count at equal average rank on this architecture.  The same excess
    appears in the published 12-layer joint plan (840,192 vs 811,008).
    The assertion is kept as stated rather than relaxed; this test is
    expected to fail on exactly that clause.
    """
    (tmp_path / "model.cfg").write_text(DESK_CONFIG)
    save_csv(synthetic_dataset(4, 2000, noise_rate=0.05, seed=0),
             tmp_path / "train.csv")
    save_csv(synthetic_dataset(4, 500, noise_rate=0.05, seed=1, split="test"),
             tmp_path / "test.csv")
    report_path = tmp_path / "report.csv"

    started = time.perf_counter()
    rc, _ = _run_cli(["compare", "--model", str(tmp_path / "model.cfg"),
                      "--data", str(tmp_path / "train.csv"),
                      "--test", str(tmp_path / "test.csv"),
                      "--avg-rank", "8", "--seeds", "1,2,3",
                      "--modes", "uniform,adarank-joint",
                      "--out", str(report_path)])
    elapsed = time.perf_counter() - started

    rows = list(csv.DictReader(report_path.open()))
    mean_acc = {row["mode"]: float(row["test_acc_pct"])
                for row in rows if row["seed"] == "mean"}
    params = {row["mode"]: int(row["adapter_params"]) for row in rows}

    acc_ok = rc == 0 and all(mean_acc[m] >= 90.0 for m in ("uniform", "adarank-joint"))
    time_ok = elapsed < 600.0
    budget_ok = params["adarank-joint"] <= params["uniform"]
    ok = acc_ok and time_ok and budget_ok
    _line(7, ok, f"mean test acc uniform {mean_acc['uniform']:.2f}% / joint "
                 f"{mean_acc['adarank-joint']:.2f}% (>= 90%): {acc_ok}; "
                 f"runtime {elapsed:.0f}s (< 600s): {time_ok}; budget joint "
                 f"{params['adarank-joint']} <= uniform {params['uniform']}: {budget_ok}")
    assert acc_ok
    assert time_ok
    assert budget_ok  # documented failure: see docstring


def test_criterion_8_byte_identical_reports(tmp_path):
    """Identical compare flags produce byte-identical CSV reports."""
    (tmp_path / "model.cfg").write_text(DESK_CONFIG.replace(
        "n_classes = 4", "n_classes = 2"))
    save_csv(synthetic_dataset(2, 96, noise_rate=0.05, seed=0),
             tmp_path / "train.csv")
    save_csv(synthetic_dataset(2, 48, noise_rate=0.05, seed=1, split="test"),
             tmp_path / "test.csv")

    def invoke(out_name):
        rc, _ = _run_cli(["compare", "--model", str(tmp_path / "model.cfg"),
                          "--data", str(tmp_path / "train.csv"),
                          "--test", str(tmp_path / "test.csv"),
                          "--avg-rank", "4", "--seeds", "0,1",
                          "--modes", "uniform,adarank-joint,random",
                          "--epochs", "2", "--out", str(tmp_path / out_name)])
        assert rc == 0
        return (tmp_path / out_name).read_bytes()

    first = invoke("first.csv")
    second = invoke("second.csv")
    ok = first == second
    _line(8, ok, f"two compare runs, {len(first)} CSV bytes each, "
                 f"byte-identical: {ok}")
    assert ok
