"""Convert disagreement scores into integer rank plans under a budget.

The rule is deliberately simple: scale each score by target_avg_rank
over the mean score, then floor.  Flooring only shrinks, so the mean
rank never exceeds the budget (an optional min-rank clamp, applied after
flooring, is the one documented exception and is reported rather than
compensated).

Two normalization modes exist when several module kinds are scored at
once: "separate" uses one mean per kind, "joint" one global mean, which
lets structurally critical kinds claim rank from insensitive ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lora import RankPlan
from .model import KIND_ORDER, ModulePath
from .rng import RngStream
from .scoring import ScoreVector


def _scaled_floor(values: np.ndarray, target_avg_rank: float) -> np.ndarray:
    """floor((d_i / mean(d)) * r), evaluated in exactly that order.

    Dividing by the mean first makes the result invariant under d -> c*d
    in floating point, not just algebraically.
    """
    if target_avg_rank <= 0:
        raise ValueError("target_avg_rank must be positive")
    mean = values.mean()
    if mean <= 0.0:
        raise ValueError("degenerate scores: mean disagreement is zero")
    return np.floor((values / mean) * target_avg_rank)


def _clamp(ranks: np.ndarray, min_rank: int) -> np.ndarray:
    if min_rank > 0:
        return np.maximum(ranks, min_rank)
    return ranks


def ranks_from_scores(scores: ScoreVector, target_avg_rank: float,
                      min_rank: int = 0, provenance: str = "manual") -> RankPlan:
    """One normalization group over every entry of the score vector."""
    values = scores.values()
    ranks = _clamp(_scaled_floor(values, target_avg_rank), min_rank)
    entries = {path: int(rank) for path, rank in zip(scores.paths(), ranks)}
    return RankPlan(entries, target_avg_rank=float(target_avg_rank),
                    provenance=provenance, min_rank=min_rank, seed=scores.seed)


def separate_ranks(scores: ScoreVector, target_avg_rank: float,
                   min_rank: int = 0) -> RankPlan:
    """Normalize each module kind by its own mean score."""
    entries = {}
    for kind in scores.kinds():
        sub = scores.restrict(kind)
        ranks = _clamp(_scaled_floor(sub.values(), target_avg_rank), min_rank)
        for path, rank in zip(sub.paths(), ranks):
            entries[path] = int(rank)
    return RankPlan(entries, target_avg_rank=float(target_avg_rank),
                    provenance="adarank-separate", min_rank=min_rank, seed=scores.seed)


def joint_ranks(scores: ScoreVector, target_avg_rank: float,
                min_rank: int = 0) -> RankPlan:
    """Normalize all scored kinds by a single global mean."""
    if len(scores.kinds()) < 2:
        raise ValueError("joint allocation needs scores for at least two kinds; "
                         "use separate mode")
    plan = ranks_from_scores(scores, target_avg_rank, min_rank=min_rank)
    plan.provenance = "adarank-joint"
    return plan


def random_scores(paths, stream: RngStream) -> ScoreVector:
    """Uniform[0,1) score per path; the ablation baseline for rank allocation.

    Draws are keyed per (kind, layer) so the vector does not depend on
    path order.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("paths must be nonempty")
    scores = {}
    for path in paths:
        sub = stream.substream(KIND_ORDER.index(path.kind), path.layer)
        scores[path] = float(sub.uniform(1)[0])
    return ScoreVector(scores, seed=stream.master_seed, trials=0)


# --- validation ---------------------------------------------------------------


@dataclass
class PlanCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class ValidationReport:
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def format(self) -> str:
        width = max(len(c.name) for c in self.checks)
        lines = [f"{c.name.ljust(width)}  {'PASS' if c.passed else 'FAIL'}  {c.detail}"
                 for c in self.checks]
        lines.append(f"overall: {'PASS' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def _grouping(plan: RankPlan, scores: ScoreVector):
    """Paths grouped per normalization unit implied by the plan's provenance."""
    if plan.provenance == "adarank-separate":
        return [scores.restrict(kind).paths() for kind in scores.kinds()]
    return [scores.paths()]


def validate_plan(plan: RankPlan, scores: ScoreVector | None = None,
                  target_avg_rank: float | None = None) -> ValidationReport:
    """Check the budget, and against scores also monotonicity and reproduction.

    Never raises on a failed check; the report lists offending paths so
    callers can decide (the CLI exits nonzero on any failure).
    """
    checks = []
    r = float(target_avg_rank if target_avg_rank is not None else plan.target_avg_rank)

    mean = plan.mean_rank()
    budget_ok = mean <= r + 1e-12
    detail = f"mean rank {mean:.6g} vs budget {r:g}"
    if not budget_ok and plan.min_rank > 0:
        detail += f" (min_rank={plan.min_rank} clamp is allowed to overshoot)"
    checks.append(PlanCheck("budget", budget_ok, detail))

    if scores is not None:
        missing = [p for p in plan.entries if p not in scores.scores]
        extra = [p for p in scores.scores if p not in plan.entries]
        if missing or extra:
            names = ", ".join(str(p) for p in (missing + extra))
            checks.append(PlanCheck("coverage", False,
                                    f"plan and scores disagree on modules: {names}"))
            return ValidationReport(checks)

        violations = []
        for group in _grouping(plan, scores):
            for i, p_i in enumerate(group):
                for p_j in group[i + 1:]:
                    d_i, d_j = scores.scores[p_i], scores.scores[p_j]
                    r_i, r_j = plan.rank_for(p_i), plan.rank_for(p_j)
                    if (d_i <= d_j and r_i > r_j) or (d_j <= d_i and r_j > r_i):
                        violations.append(f"{p_i}/{p_j}")
        checks.append(PlanCheck(
            "monotonicity", not violations,
            "rank order follows score order" if not violations
            else "violations: " + ", ".join(violations)))

        if plan.provenance in ("adarank-separate", "adarank-joint", "random"):
            if plan.provenance == "adarank-separate":
                expected = separate_ranks(scores, r, min_rank=plan.min_rank)
            else:
                expected = ranks_from_scores(scores, r, min_rank=plan.min_rank)
            mismatched = [str(p) for p in plan.entries
                          if plan.rank_for(p) != expected.rank_for(p)]
            checks.append(PlanCheck(
                "reproduction", not mismatched,
                "ranks match the allocation formula" if not mismatched
                else "mismatched: " + ", ".join(mismatched)))

    return ValidationReport(checks)
