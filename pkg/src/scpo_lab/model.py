"""Tabular conditional policies.

A :class:`PolicyTable` holds one logit per (context, response) and stands in
for a multimodal language model: every log-probability, gradient and KL term
is exact. Text-only conditioning is the ``(NULL_IMAGE, query)`` context row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

NULL_IMAGE = None
"""Image slot of the text-only context ``pi(y | Q)``."""

POLICY_FORMAT = "scpo-policy"
POLICY_VERSION = 1


class ShapeError(ValueError):
    """Two tables do not share vocab or context sets."""


@dataclass(frozen=True, order=False)
class Context:
    image_slot: str | None
    query_id: str

    @property
    def is_text_only(self) -> bool:
        return self.image_slot is NULL_IMAGE

    def sort_key(self) -> tuple:
        return (self.query_id, self.image_slot is not None, self.image_slot or "")


def _index(items: Sequence[Hashable], what: str) -> dict:
    index = {item: i for i, item in enumerate(items)}
    if len(index) != len(items):
        raise ValueError(f"duplicate entries in {what}")
    return index


class _Table:
    """Shared indexing for policy and reward tables."""

    def __init__(self, contexts: Sequence[Context], vocab: Sequence[Hashable], values: np.ndarray):
        self.contexts = list(contexts)
        self.vocab = list(vocab)
        self._ctx_index = _index(self.contexts, "contexts")
        self._vocab_index = _index(self.vocab, "vocab")
        values = np.array(values, dtype=np.float64)
        if values.shape != (len(self.contexts), len(self.vocab)):
            raise ShapeError(
                f"table shape {values.shape} does not match "
                f"({len(self.contexts)} contexts, {len(self.vocab)} responses)"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("table entries must be finite")
        self._values = values

    def context_index(self, c: Context) -> int:
        try:
            return self._ctx_index[c]
        except KeyError:
            raise KeyError(f"unknown context {c!r}") from None

    def response_index(self, y: Hashable) -> int:
        try:
            return self._vocab_index[y]
        except KeyError:
            raise KeyError(f"unknown response id {y!r}") from None

    def same_index_sets(self, other: "_Table") -> bool:
        return self.contexts == other.contexts and self.vocab == other.vocab

    def check_compatible(self, other: "_Table") -> None:
        if not self.same_index_sets(other):
            raise ShapeError("tables do not share vocab and context sets")


class RewardTable(_Table):
    """Reward ``r(context, y)`` in nats times beta."""

    @property
    def values(self) -> np.ndarray:
        return self._values

    def get(self, c: Context, y: Hashable) -> float:
        return float(self._values[self.context_index(c), self.response_index(y)])

    def __add__(self, other: "RewardTable") -> "RewardTable":
        self.check_compatible(other)
        return RewardTable(self.contexts, self.vocab, self._values + other._values)


class PolicyTable(_Table):
    """Softmax policy over ``vocab`` for each context row of ``logits``."""

    @property
    def logits(self) -> np.ndarray:
        return self._values

    @logits.setter
    def logits(self, new: np.ndarray) -> None:
        new = np.array(new, dtype=np.float64)
        if new.shape != self._values.shape:
            raise ShapeError(f"logit shape {new.shape} != {self._values.shape}")
        if not np.all(np.isfinite(new)):
            raise ValueError("logits must be finite")
        self._values = new

    @classmethod
    def uniform(cls, contexts: Sequence[Context], vocab: Sequence[Hashable]) -> "PolicyTable":
        return cls(contexts, vocab, np.zeros((len(contexts), len(vocab))))

    def log_probs(self) -> np.ndarray:
        """Row-wise log-softmax of the whole table."""
        return self._values - logsumexp(self._values, axis=1, keepdims=True)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def row_log_probs(self, c: Context) -> np.ndarray:
        row = self._values[self.context_index(c)]
        return row - logsumexp(row)

    def copy(self) -> "PolicyTable":
        return PolicyTable(self.contexts, self.vocab, self._values.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyTable):
            return NotImplemented
        return self.same_index_sets(other) and np.array_equal(self._values, other._values)

    __hash__ = None  # mutable

    def __repr__(self) -> str:
        return f"PolicyTable({len(self.contexts)} contexts x {len(self.vocab)} responses)"

    # -- serialization -------------------------------------------------

    def to_json(self) -> str:
        record = {
            "format": POLICY_FORMAT,
            "version": POLICY_VERSION,
            "float_mode": "hex",
            "vocab": self.vocab,
            "contexts": [[c.image_slot, c.query_id] for c in self.contexts],
            "logits": [x.hex() for x in self._values.ravel().tolist()],
        }
        return json.dumps(record, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PolicyTable":
        record = json.loads(text)
        if record.get("format") != POLICY_FORMAT or record.get("version") != POLICY_VERSION:
            raise ValueError(
                f"unsupported policy record {record.get('format')!r} v{record.get('version')!r}"
            )
        contexts = [Context(slot, q) for slot, q in record["contexts"]]
        vocab = record["vocab"]
        flat = np.array([float.fromhex(s) for s in record["logits"]], dtype=np.float64)
        if flat.size != len(contexts) * len(vocab):
            raise ShapeError(f"expected {len(contexts) * len(vocab)} logits, got {flat.size}")
        return cls(contexts, vocab, flat.reshape(len(contexts), len(vocab)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "PolicyTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def log_prob(policy: PolicyTable, c: Context, y: Hashable) -> float:
    """Exact ``log pi(y | c)`` in nats."""
    j = policy.response_index(y)
    return float(policy.row_log_probs(c)[j])


def grad_log_prob(policy: PolicyTable, c: Context, y: Hashable) -> np.ndarray:
    """Gradient of ``log pi(y | c)`` with respect to every logit.

    Only row ``c`` is non-zero: ``onehot(y) - softmax(row)``.
    """
    i = policy.context_index(c)
    j = policy.response_index(y)
    grad = np.zeros_like(policy.logits)
    grad[i] = -np.exp(policy.row_log_probs(c))
    grad[i, j] += 1.0
    return grad


def snapshot(policy: PolicyTable) -> PolicyTable:
    """Frozen, identity-distinct copy used as a reference model."""
    return policy.copy()


def kl_divergence(p: PolicyTable, q: PolicyTable, c: Context) -> float:
    """``KL(p(.|c) || q(.|c))`` in nats."""
    p.check_compatible(q)
    lp = p.row_log_probs(c)
    lq = q.row_log_probs(c)
    kl = float(np.sum(np.exp(lp) * (lp - lq)))
    # rounding can leave a tiny negative residue for near-identical rows
    return max(kl, 0.0)


def mean_kl(p: PolicyTable, q: PolicyTable, contexts: Iterable[Context]) -> float:
    contexts = list(contexts)
    if not contexts:
        return 0.0
    return float(np.mean([kl_divergence(p, q, c) for c in contexts]))


def tv_distance(p: PolicyTable, q: PolicyTable, c: Context) -> float:
    p.check_compatible(q)
    return 0.5 * float(np.sum(np.abs(np.exp(p.row_log_probs(c)) - np.exp(q.row_log_probs(c)))))


def max_tv_distance(p: PolicyTable, q: PolicyTable) -> float:
    p.check_compatible(q)
    return float(0.5 * np.max(np.sum(np.abs(p.probs() - q.probs()), axis=1)))


def closed_form_optimum(base: PolicyTable, r: RewardTable, beta: float) -> PolicyTable:
    """KL-regularized optimum ``pi ∝ base * exp(r / beta)`` per context.

    The returned logits are normalized log-probabilities.
    """
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    base.check_compatible(r)
    raw = base.logits + r.values / beta
    return PolicyTable(base.contexts, base.vocab, raw - logsumexp(raw, axis=1, keepdims=True))


def policy_reward_gap(
    pi: PolicyTable, ref: PolicyTable, beta: float, c: Context, y1: Hashable, y2: Hashable
) -> float:
    """Implicit reward difference ``beta * (logratio(y1) - logratio(y2))``.

    The per-context partition function cancels, so for ``pi`` produced by
    :func:`closed_form_optimum` this equals ``r[c, y1] - r[c, y2]``.
    """
    pi.check_compatible(ref)
    lp = pi.row_log_probs(c)
    lr = ref.row_log_probs(c)
    j1, j2 = pi.response_index(y1), pi.response_index(y2)
    return beta * ((lp[j1] - lr[j1]) - (lp[j2] - lr[j2]))
