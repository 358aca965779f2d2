"""Preference losses: DPO, the complementary (text + image) pair, the
symmetric match/contradict family, and their weighted total.

Every loss is ``-log sigmoid(beta * margin)`` evaluated as
``softplus(-beta * margin)``; raw margins are never exponentiated.
Scalar functions mirror the per-pair definitions; :class:`PairBatch`
evaluates the same quantities vectorized over a dataset, with the mean
as batch reduction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Hashable, Sequence

import numpy as np
from scipy.special import expit

from .model import NULL_IMAGE, Context, PolicyTable, log_prob


@dataclass(frozen=True)
class PreferencePair:
    pair_id: str
    query_id: str
    chosen_image: str
    rejected_image: str
    chosen_response: Hashable
    rejected_response: Hashable

    def __post_init__(self):
        if self.chosen_image == self.rejected_image:
            raise ValueError(f"pair {self.pair_id}: chosen and rejected image coincide")
        if self.chosen_response == self.rejected_response:
            raise ValueError(f"pair {self.pair_id}: chosen and rejected response coincide")

    def contexts(self) -> tuple[Context, Context, Context]:
        """``(I_w, Q)``, ``(I_l, Q)`` and the text-only ``(NULL, Q)``."""
        return (
            Context(self.chosen_image, self.query_id),
            Context(self.rejected_image, self.query_id),
            Context(NULL_IMAGE, self.query_id),
        )

    def swapped(self) -> "PreferencePair":
        """Exchange ``(I_w, y_w)`` with ``(I_l, y_l)``."""
        return PreferencePair(
            self.pair_id,
            self.query_id,
            self.rejected_image,
            self.chosen_image,
            self.rejected_response,
            self.chosen_response,
        )


@dataclass(frozen=True)
class Hyperparams:
    beta: float = 0.1
    beta1: float = 0.1
    beta2: float = 0.1
    lam: float = 0.2
    learning_rate: float = 1e-2
    batch_size: int | None = None  # None: full batch
    epochs_per_stage: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("beta", "beta1", "beta2", "learning_rate"):
            value = getattr(self, name)
            if name == "learning_rate":
                if not (value >= 0 and math.isfinite(value)):
                    raise ValueError(f"learning_rate must be finite and >= 0, got {value}")
            elif not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size}")
        if self.epochs_per_stage < 1:
            raise ValueError(f"epochs_per_stage must be positive, got {self.epochs_per_stage}")

    def replace(self, **changes) -> "Hyperparams":
        return Hyperparams(**{**asdict(self), **changes})


@dataclass(frozen=True)
class LossBreakdown:
    l_text: float
    l_image: float
    l_cco: float
    l_match_w: float
    l_contradict_l: float
    l_match_l: float
    l_contradict_w: float
    l_cso: float
    l_total: float

    @classmethod
    def compose(cls, text, image, match_w, contradict_l, match_l, contradict_w, lam) -> "LossBreakdown":
        cco = text + image
        cso = match_w + contradict_l + match_l + contradict_w
        return cls(text, image, cco, match_w, contradict_l, match_l, contradict_w, cso, cco + lam * cso)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def softplus(x):
    return np.logaddexp(0.0, x)


def neg_log_sigmoid(z: float) -> float:
    """``-log sigmoid(z)`` without overflow."""
    return float(softplus(-z))


def bt_probability(r_w: float, r_l: float) -> float:
    """Bradley-Terry preference probability ``sigmoid(r_w - r_l)``."""
    return float(expit(r_w - r_l))


def _logratio(pi: PolicyTable, ref: PolicyTable, c: Context, y) -> float:
    return log_prob(pi, c, y) - log_prob(ref, c, y)


def _contrast_loss(pi, ref, c_w: Context, y_w, c_l: Context, y_l, beta: float) -> float:
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    m = _logratio(pi, ref, c_w, y_w) - _logratio(pi, ref, c_l, y_l)
    return neg_log_sigmoid(beta * m)


def dpo_loss(pi: PolicyTable, ref: PolicyTable, c: Context, y_w, y_l, beta: float) -> float:
    return _contrast_loss(pi, ref, c, y_w, c, y_l, beta)


def text_loss(pi, ref, pair: PreferencePair, beta: float) -> float:
    """Chosen vs. rejected response under the chosen image."""
    c_w, _, _ = pair.contexts()
    return dpo_loss(pi, ref, c_w, pair.chosen_response, pair.rejected_response, beta)


def image_loss(pi, ref, pair: PreferencePair, beta: float) -> float:
    """Chosen response under the chosen vs. the rejected image."""
    c_w, c_l, _ = pair.contexts()
    y = pair.chosen_response
    return _contrast_loss(pi, ref, c_w, y, c_l, y, beta)


def cco_loss(pi, ref, pair: PreferencePair, beta: float) -> tuple[float, float, float]:
    lt = text_loss(pi, ref, pair, beta)
    li = image_loss(pi, ref, pair, beta)
    return lt, li, lt + li


def match_loss(pi, ref, image_slot: str, y, q: str, beta1: float) -> float:
    """Prefer ``y`` under its image over the text-only context."""
    return _contrast_loss(pi, ref, Context(image_slot, q), y, Context(NULL_IMAGE, q), y, beta1)


def contradict_loss(pi, ref, image_slot: str, y, q: str, beta2: float) -> float:
    """Prefer the text-only context over ``y`` under a mismatched image."""
    return _contrast_loss(pi, ref, Context(NULL_IMAGE, q), y, Context(image_slot, q), y, beta2)


def cso_loss(pi, ref, pair: PreferencePair, beta1: float, beta2: float) -> tuple[float, float, float, float, float]:
    """``(match_w, contradict_l, match_l, contradict_w, sum)``."""
    q = pair.query_id
    iw, il = pair.chosen_image, pair.rejected_image
    yw, yl = pair.chosen_response, pair.rejected_response
    mw = match_loss(pi, ref, iw, yw, q, beta1)
    cl = contradict_loss(pi, ref, il, yw, q, beta2)
    ml = match_loss(pi, ref, il, yl, q, beta1)
    cw = contradict_loss(pi, ref, iw, yl, q, beta2)
    return mw, cl, ml, cw, mw + cl + ml + cw


def scpo_loss(pi, ref, pair: PreferencePair, hp: Hyperparams) -> LossBreakdown:
    lt, li, _ = cco_loss(pi, ref, pair, hp.beta)
    mw, cl, ml, cw, _ = cso_loss(pi, ref, pair, hp.beta1, hp.beta2)
    return LossBreakdown.compose(lt, li, mw, cl, ml, cw, hp.lam)


def margin(pi: PolicyTable, ref: PolicyTable, c: Context, y_w, y_l) -> float:
    """Policy log-odds minus reference log-odds of ``y_w`` over ``y_l``."""
    return _logratio(pi, ref, c, y_w) - _logratio(pi, ref, c, y_l)


def margin_grad_factor(m: float, beta: float) -> float:
    """``d/dM [-log sigmoid(beta M)] = -beta * sigmoid(-beta M)``."""
    return float(-beta * expit(-beta * m))


def scpo_grad(pi: PolicyTable, ref: PolicyTable, pair: PreferencePair, hp: Hyperparams) -> np.ndarray:
    """Exact gradient of the per-pair total loss with respect to ``pi.logits``."""
    _, grad = PairBatch(pi, [pair]).loss_and_grad(pi, ref, hp)
    return grad


# -- vectorized evaluation ---------------------------------------------


class PairBatch:
    """Context/response index arrays for a fixed list of pairs.

    The index layout is resolved once against a policy's context and vocab
    ordering; it stays valid for any table with the same index sets.
    """

    def __init__(self, policy: PolicyTable, pairs: Sequence[PreferencePair]):
        self.pairs = list(pairs)
        ctx = policy.context_index
        resp = policy.response_index
        iw, il, inull, yw, yl = [], [], [], [], []
        for p in self.pairs:
            c_w, c_l, c_0 = p.contexts()
            iw.append(ctx(c_w))
            il.append(ctx(c_l))
            inull.append(ctx(c_0))
            yw.append(resp(p.chosen_response))
            yl.append(resp(p.rejected_response))
        self.iw = np.array(iw, dtype=np.intp)
        self.il = np.array(il, dtype=np.intp)
        self.inull = np.array(inull, dtype=np.intp)
        self.yw = np.array(yw, dtype=np.intp)
        self.yl = np.array(yl, dtype=np.intp)

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, idx: np.ndarray) -> "PairBatch":
        out = object.__new__(PairBatch)
        out.pairs = [self.pairs[i] for i in idx]
        for name in ("iw", "il", "inull", "yw", "yl"):
            setattr(out, name, getattr(self, name)[idx])
        return out

    def touched_rows(self) -> np.ndarray:
        return np.unique(np.concatenate([self.iw, self.il, self.inull]))

    def _terms(self, logratio: np.ndarray):
        """Six per-pair contrast terms as ``(coef, +ctx, +y, -ctx, -y)``."""
        iw, il, i0, yw, yl = self.iw, self.il, self.inull, self.yw, self.yl
        return (
            ((iw, yw), (iw, yl)),  # text
            ((iw, yw), (il, yw)),  # image
            ((iw, yw), (i0, yw)),  # match (I_w, y_w)
            ((i0, yw), (il, yw)),  # contradict (I_l, y_w)
            ((il, yl), (i0, yl)),  # match (I_l, y_l)
            ((i0, yl), (iw, yl)),  # contradict (I_w, y_l)
        )

    def per_pair_losses(self, pi: PolicyTable, ref: PolicyTable, hp: Hyperparams) -> np.ndarray:
        """Array of shape ``(6, n)``: text, image, match_w, contradict_l, match_l, contradict_w."""
        losses, _ = self._evaluate(pi, ref, hp, want_grad=False)
        return losses

    def _evaluate(self, pi, ref, hp, want_grad: bool):
        lp = pi.log_probs()
        lr = lp - ref.log_probs()
        betas = (hp.beta, hp.beta, hp.beta1, hp.beta2, hp.beta1, hp.beta2)
        weights = (1.0, 1.0, hp.lam, hp.lam, hp.lam, hp.lam)
        n = len(self)
        losses = np.empty((6, n))
        coef = np.zeros_like(lp) if want_grad else None
        for k, ((pos, neg), beta, w) in enumerate(zip(self._terms(lr), betas, weights)):
            m = lr[pos] - lr[neg]
            losses[k] = softplus(-beta * m)
            if want_grad and w != 0.0:
                # dl/dM per pair, scaled by the term weight and the batch mean
                g = w * (-beta * expit(-beta * m)) / n
                np.add.at(coef, pos, g)
                np.add.at(coef, neg, -g)
        if not want_grad:
            return losses, None
        # d/dlogits of sum_{c,y} coef[c,y] * log p(y|c)
        grad = coef - coef.sum(axis=1, keepdims=True) * np.exp(lp)
        return losses, grad

    def mean_breakdown(self, losses: np.ndarray, lam: float) -> LossBreakdown:
        n = losses.shape[1]
        means = [math.fsum(row) / n for row in losses.tolist()]
        return LossBreakdown.compose(*means, lam)

    def loss(self, pi, ref, hp: Hyperparams) -> LossBreakdown:
        if len(self) == 0:
            raise ValueError("empty pair batch")
        losses, _ = self._evaluate(pi, ref, hp, want_grad=False)
        return self.mean_breakdown(losses, hp.lam)

    def loss_and_grad(self, pi, ref, hp: Hyperparams) -> tuple[LossBreakdown, np.ndarray]:
        """Mean loss breakdown and the gradient of its ``l_total``."""
        if len(self) == 0:
            raise ValueError("empty pair batch")
        losses, grad = self._evaluate(pi, ref, hp, want_grad=True)
        return self.mean_breakdown(losses, hp.lam), grad


def population_dpo_loss_and_grad(
    pi: PolicyTable,
    ref: PolicyTable,
    rows: np.ndarray,
    ya: np.ndarray,
    yb: np.ndarray,
    weights: np.ndarray,
    beta: float,
) -> tuple[float, np.ndarray]:
    """Weighted DPO loss over oriented comparisons ``(row, y_a > y_b)``.

    Returns the weighted mean loss ``sum_k w_k l_k / sum_k w_k`` and its gradient.
    """
    lp = pi.log_probs()
    lr = lp - ref.log_probs()
    m = lr[rows, ya] - lr[rows, yb]
    total_w = math.fsum(weights.tolist())
    loss = math.fsum((weights * softplus(-beta * m)).tolist()) / total_w
    g = weights * (-beta * expit(-beta * m)) / total_w
    coef = np.zeros_like(lp)
    np.add.at(coef, (rows, ya), g)
    np.add.at(coef, (rows, yb), -g)
    grad = coef - coef.sum(axis=1, keepdims=True) * np.exp(lp)
    return loss, grad
