"""Desk-scale evaluation: preference and grounding accuracy, a greedy
hallucination rate, the F1-Gen composite, and stage trajectories."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import PolicyTable
from .objectives import PairBatch, PreferencePair

EVAL_COLUMNS = (
    "run", "order_mode", "stage_index", "stage",
    "preference_accuracy", "visual_grounding_accuracy", "halrate",
    "kl_to_ref_at_end", "stage_end_loss", "f1_gen",
)


@dataclass
class EvalReport:
    preference_accuracy: float
    visual_grounding_accuracy: float
    halrate: float
    f1_gen: float | None = None
    per_stage: dict[str, "EvalReport"] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("preference_accuracy", "visual_grounding_accuracy", "halrate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def _rate(wins: np.ndarray, ties: np.ndarray) -> float:
    n = wins.size
    if n == 0:
        raise ValueError("cannot evaluate an empty pair set")
    return (int(wins.sum()) + 0.5 * int(ties.sum())) / n


def preference_accuracy(policy: PolicyTable, pairs: Sequence[PreferencePair]) -> float:
    """Share of pairs with ``pi(y_w|I_w,Q) > pi(y_l|I_w,Q)``; ties count 1/2."""
    if not pairs:
        raise ValueError("cannot evaluate an empty pair set")
    b = PairBatch(policy, pairs)
    lp = policy.log_probs()
    a, r = lp[b.iw, b.yw], lp[b.iw, b.yl]
    return _rate(a > r, a == r)


def visual_grounding_accuracy(policy: PolicyTable, pairs: Sequence[PreferencePair]) -> float:
    """Share of pairs with ``pi(y_w|I_w,Q) > pi(y_w|I_l,Q)``; ties count 1/2."""
    if not pairs:
        raise ValueError("cannot evaluate an empty pair set")
    b = PairBatch(policy, pairs)
    lp = policy.log_probs()
    a, r = lp[b.iw, b.yw], lp[b.il, b.yw]
    return _rate(a > r, a == r)


def halrate(policy: PolicyTable, pairs: Sequence[PreferencePair]) -> float:
    """Share of pairs whose greedy response under ``(I_w, Q)`` is ``y_l``.

    Greedy ties go to the lowest response id.
    """
    if not pairs:
        raise ValueError("cannot evaluate an empty pair set")
    b = PairBatch(policy, pairs)
    # vocab may be unordered; rank columns by response id for the tie-break
    order = sorted(range(len(policy.vocab)), key=lambda j: policy.vocab[j])
    rows = policy.logits[b.iw][:, order]
    greedy = np.asarray(order)[np.argmax(rows, axis=1)]
    return float(np.mean(greedy == b.yl))


def f1_gen(chair_pct: float, cover_pct: float) -> float:
    """Harmonic mean of precision ``1 - CHAIR`` and recall ``Cover``, in percent."""
    for name, v in (("chair", chair_pct), ("cover", cover_pct)):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"{name} {v} outside [0, 100]")
    precision = 1.0 - chair_pct / 100.0
    recall = cover_pct / 100.0
    if precision + recall <= 0.0:
        raise ValueError("precision and recall are both zero")
    return 200.0 * precision * recall / (precision + recall)


def evaluate(
    policy: PolicyTable,
    pairs: Sequence[PreferencePair],
    chair_cover: tuple[float, float] | None = None,
) -> EvalReport:
    return EvalReport(
        preference_accuracy(policy, pairs),
        visual_grounding_accuracy(policy, pairs),
        halrate(policy, pairs),
        f1_gen(*chair_cover) if chair_cover is not None else None,
    )


@dataclass
class TrajectoryRow:
    run: str
    order_mode: str
    stage_index: int
    stage: str
    report: EvalReport
    kl_to_ref_at_end: float
    stage_end_loss: float


def curriculum_report(
    traces: Sequence,
    stage_evals: Sequence[EvalReport],
    run: str = "run",
    stage_names: Sequence[str] | None = None,
) -> tuple[EvalReport, list[TrajectoryRow]]:
    """Align per-stage evaluations with stage traces.

    Returns the final-stage report carrying a ``per_stage`` breakdown, and
    one trajectory row per stage in training order. ``stage_names``, when
    given, must match the traces' stage names in order.
    """
    if len(traces) != len(stage_evals) or not traces:
        raise ValueError(f"{len(traces)} stage traces but {len(stage_evals)} stage evaluations")
    names = [t.stage_name for t in traces]
    if stage_names is not None and list(stage_names) != names:
        raise ValueError(f"stage mismatch: traces {names} vs plan {list(stage_names)}")
    rows = [
        TrajectoryRow(run, t.order_mode, t.stage_index, t.stage_name, ev, t.kl_to_ref_at_end, t.end_loss)
        for t, ev in zip(traces, stage_evals)
    ]
    last = stage_evals[-1]
    final = EvalReport(
        last.preference_accuracy, last.visual_grounding_accuracy, last.halrate, last.f1_gen,
        per_stage={name: ev for name, ev in zip(names, stage_evals)},
    )
    return final, rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def trajectory_csv(rows: Sequence[TrajectoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for r in rows:
        w.writerow([_fmt(v) for v in (
            r.run, r.order_mode, r.stage_index, r.stage,
            r.report.preference_accuracy, r.report.visual_grounding_accuracy, r.report.halrate,
            r.kl_to_ref_at_end, r.stage_end_loss, r.report.f1_gen,
        )])
    return buf.getvalue()


def read_trajectory_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != EVAL_COLUMNS:
        raise ValueError("trajectory header mismatch")
    if not rows and text.split("\n", 1)[0] != ",".join(EVAL_COLUMNS):
        raise ValueError("trajectory header mismatch")
    return rows

