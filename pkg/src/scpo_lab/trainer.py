"""Staged curriculum training with a reference reset at every stage boundary.

Each stage runs gradient descent on the mean SCPO loss of its pairs
against a frozen reference; the next stage's reference is a snapshot of
the policy the stage produced, so each stage opens at zero KL.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .difficulty import CurriculumPlan
from .model import (
    Context,
    PolicyTable,
    RewardTable,
    closed_form_optimum,
    max_tv_distance,
    mean_kl,
    snapshot,
)
from .objectives import (
    Hyperparams,
    LossBreakdown,
    PairBatch,
    PreferencePair,
    bt_probability,
    margin_grad_factor,
    population_dpo_loss_and_grad,
)

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Comparison:
    """An unordered response pair under one context, for population-mode DPO."""

    context: Context
    y_a: object
    y_b: object


@dataclass
class EpochRecord:
    epoch: int
    total: float
    grad_norm: float
    loss: LossBreakdown | None = None


@dataclass
class StageTrace:
    stage_name: str
    epochs: list[EpochRecord]
    kl_to_ref_at_start: float
    kl_to_ref_at_end: float
    start_loss: float
    end_loss: float
    policy_snapshot: PolicyTable | None = field(default=None, repr=False)
    stage_index: int = 0
    order_mode: str = "forward"
    n_pairs: int = 0

    def records(self) -> list[dict]:
        """One flat record per epoch, as written to trace files."""
        out = []
        for e in self.epochs:
            rec = {
                "stage_index": self.stage_index,
                "stage": self.stage_name,
                "order_mode": self.order_mode,
                "n_pairs": self.n_pairs,
                "epoch": e.epoch,
                "loss_total": e.total,
                "grad_norm": e.grad_norm,
            }
            if e.loss is not None:
                rec.update(e.loss.as_dict())
            rec.update({
                "kl_to_ref_at_start": self.kl_to_ref_at_start,
                "kl_to_ref_at_end": self.kl_to_ref_at_end,
                "stage_start_loss": self.start_loss,
                "stage_end_loss": self.end_loss,
            })
            out.append(rec)
        return out


def trace_lines(traces: Sequence[StageTrace]) -> str:
    """JSON-lines trace; floats use ``repr`` so values round-trip exactly."""
    return "".join(
        json.dumps(rec, separators=(",", ":")) + "\n" for t in traces for rec in t.records()
    )


def _check_finite(value: float, grad: np.ndarray, stage: str, epoch: int) -> None:
    if not math.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericError(
            f"non-finite loss or gradient in stage {stage!r} epoch {epoch}: loss={value!r}, "
            f"max|grad|={np.nanmax(np.abs(grad)) if grad.size else 0.0!r}"
        )


def _step(policy: PolicyTable, grad: np.ndarray, lr: float, stage: str, epoch: int) -> None:
    with np.errstate(over="ignore", invalid="ignore"):
        new = policy.logits - lr * grad
    if not np.all(np.isfinite(new)):
        raise NumericError(f"logits overflowed in stage {stage!r} epoch {epoch} (learning rate {lr!r})")
    policy.logits = new


def _population_arrays(policy: PolicyTable, comparisons: Sequence[Comparison], reward: RewardTable):
    """Both orientations of every comparison, weighted by Bradley-Terry probabilities."""
    rows, ya, yb, w = [], [], [], []
    for cmp in comparisons:
        i = policy.context_index(cmp.context)
        a, b = policy.response_index(cmp.y_a), policy.response_index(cmp.y_b)
        ra, rb = reward.values[i, a], reward.values[i, b]
        rows += [i, i]
        ya += [a, b]
        yb += [b, a]
        w += [bt_probability(ra, rb), bt_probability(rb, ra)]
    return (np.array(rows, dtype=np.intp), np.array(ya, dtype=np.intp),
            np.array(yb, dtype=np.intp), np.array(w))


def train_stage(
    policy: PolicyTable,
    ref: PolicyTable,
    pairs: Sequence,
    hp: Hyperparams,
    mode: str = "sampled",
    *,
    reward: RewardTable | None = None,
    grad_tol: float | None = None,
    max_epochs: int | None = None,
    stage_name: str = "stage",
    rng: np.random.Generator | None = None,
) -> tuple[PolicyTable, StageTrace]:
    """Gradient descent on one stage's mean loss against a frozen ``ref``.

    ``mode="sampled"`` optimizes the SCPO loss over ``pairs``
    (:class:`PreferencePair`), full batch unless ``hp.batch_size`` is set,
    in which case batches follow a seeded shuffle each epoch.
    ``mode="population"`` takes :class:`Comparison` items and a ground-truth
    ``reward`` and optimizes the Bradley-Terry-weighted pure DPO loss over
    both orientations of each comparison, full batch.

    With ``grad_tol`` set, descent runs until the full-batch gradient norm
    drops to ``grad_tol`` or ``max_epochs`` is reached; otherwise it runs
    ``hp.epochs_per_stage`` epochs. The input policy is not modified.
    """
    if not pairs:
        raise ValueError(f"stage {stage_name!r} has no pairs")
    policy.check_compatible(ref)
    current = policy.copy()
    lr = hp.learning_rate
    if grad_tol is None:
        epochs_cap = hp.epochs_per_stage
    else:
        epochs_cap = max_epochs or 1_000_000

    if mode == "population":
        if reward is None:
            raise ValueError("population mode needs a reward table")
        rows, ya, yb, w = _population_arrays(current, pairs, reward)

        def full(pi):
            return population_dpo_loss_and_grad(pi, ref, rows, ya, yb, w, hp.beta)

        touched = np.unique(rows)
        batch = None
    elif mode == "sampled":
        batch = PairBatch(current, pairs)
        touched = batch.touched_rows()

        def full(pi):
            return batch.loss_and_grad(pi, ref, hp)
    else:
        raise ValueError(f"unknown training mode {mode!r}")

    def total_of(loss) -> float:
        return loss.l_total if isinstance(loss, LossBreakdown) else loss

    stage_contexts = [current.contexts[i] for i in touched]
    kl_start = mean_kl(current, ref, stage_contexts)
    start_loss, grad = full(current)
    _check_finite(total_of(start_loss), grad, stage_name, 0)

    use_minibatch = batch is not None and hp.batch_size is not None and hp.batch_size < len(batch)
    if use_minibatch and rng is None:
        rng = np.random.default_rng(hp.seed)

    epochs: list[EpochRecord] = []
    loss, epoch = start_loss, 0
    while epoch < epochs_cap:
        if grad_tol is not None and float(np.linalg.norm(grad)) <= grad_tol:
            break
        epoch += 1
        if use_minibatch:
            order = rng.permutation(len(batch))
            parts, norms = [], []
            for lo in range(0, len(batch), hp.batch_size):
                sub = batch.subset(order[lo : lo + hp.batch_size])
                bd, g = sub.loss_and_grad(current, ref, hp)
                _check_finite(bd.l_total, g, stage_name, epoch)
                parts.append((len(sub), bd))
                norms.append(float(np.linalg.norm(g)))
                _step(current, g, lr, stage_name, epoch)
            n = len(batch)
            comp = {
                k: math.fsum(m * getattr(bd, k) for m, bd in parts) / n
                for k in ("l_text", "l_image", "l_match_w", "l_contradict_l", "l_match_l", "l_contradict_w")
            }
            epoch_loss = LossBreakdown.compose(
                comp["l_text"], comp["l_image"], comp["l_match_w"], comp["l_contradict_l"],
                comp["l_match_l"], comp["l_contradict_w"], hp.lam,
            )
            epochs.append(EpochRecord(epoch, epoch_loss.l_total, math.fsum(norms) / len(norms), epoch_loss))
            loss, grad = full(current)
        else:
            norm = float(np.linalg.norm(grad))
            epochs.append(EpochRecord(
                epoch, total_of(loss), norm, loss if isinstance(loss, LossBreakdown) else None
            ))
            _step(current, grad, lr, stage_name, epoch)
            loss, grad = full(current)
            _check_finite(total_of(loss), grad, stage_name, epoch)

    kl_end = mean_kl(current, ref, stage_contexts)
    trace = StageTrace(
        stage_name=stage_name,
        epochs=epochs,
        kl_to_ref_at_start=kl_start,
        kl_to_ref_at_end=kl_end,
        start_loss=total_of(start_loss),
        end_loss=total_of(loss),
        policy_snapshot=snapshot(current),
        n_pairs=len(pairs),
    )
    log.debug("stage %s: %d epochs, loss %.6g -> %.6g", stage_name, epoch, trace.start_loss, trace.end_loss)
    return current, trace


def run_curriculum(
    policy0: PolicyTable,
    plan: CurriculumPlan,
    pairs: Mapping[str, PreferencePair],
    hp: Hyperparams,
) -> tuple[PolicyTable, list[StageTrace]]:
    """Train stage by stage in ``plan.order_mode`` order.

    Before each stage the reference becomes a snapshot of the current policy.
    Mini-batch shuffles draw from one generator seeded by ``hp.seed``.
    """
    current = policy0
    rng = np.random.default_rng(hp.seed)
    traces = []
    for k, (name, ids) in enumerate(plan.ordered_stages()):
        ref = snapshot(current)
        stage_pairs = [pairs[i] for i in ids]
        current, trace = train_stage(current, ref, stage_pairs, hp, stage_name=name, rng=rng)
        trace.stage_index = k
        trace.order_mode = plan.order_mode
        traces.append(trace)
    return current, traces


def verify_cumulative_identity(policy0: PolicyTable, reward_tables: Sequence[RewardTable], beta: float) -> float:
    """Max per-context TV distance between sequential and one-shot optima.

    Sequential: ``pi_t = optimum(pi_{t-1}, r_t)``; one-shot: ``optimum(pi_0, sum r_t)``.
    """
    if not reward_tables:
        raise ValueError("need at least one reward table")
    sequential = policy0
    for r in reward_tables:
        sequential = closed_form_optimum(sequential, r, beta)
    summed = reward_tables[0]
    for r in reward_tables[1:]:
        summed = summed + r
    direct = closed_form_optimum(policy0, summed, beta)
    return max_tv_distance(sequential, direct)


@dataclass(frozen=True)
class SaturationRow:
    margin: float
    grad_factor: float


def saturation_probe(margins: Sequence[float], beta: float) -> list[SaturationRow]:
    """``dl/dM`` over a margin grid, with its sign and limits checked.

    The factor must be negative, lie in ``(-beta, 0)`` up to rounding, and
    decrease in magnitude as the margin grows.
    """
    rows = [SaturationRow(float(m), margin_grad_factor(m, beta)) for m in margins]
    for r in rows:
        if not math.isfinite(r.margin):
            raise ValueError("margins must be finite")
        if not (-beta <= r.grad_factor <= 0.0):
            raise AssertionError(f"gradient factor {r.grad_factor} outside [-beta, 0] at M={r.margin}")
    by_margin = sorted(rows, key=lambda r: r.margin)
    for lo, hi in zip(by_margin, by_margin[1:]):
        if abs(hi.grad_factor) > abs(lo.grad_factor):
            raise AssertionError(f"gradient magnitude grows from M={lo.margin} to M={hi.margin}")
    return rows
