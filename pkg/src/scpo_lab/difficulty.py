"""Pair difficulty scoring and curriculum partitioning.

Three raw metrics per preference pair:

* ``h_bar``: mean forced-choice binary entropy of the policy under each image,
* ``s_clip``: cosine proximity of the two image embeddings,
* ``d_ot``: optimal-transport cost between the two patch sets under a joint
  feature/position cost.

Each column is z-standardized over the dataset (population std, constant
columns map to zero) and combined with weights, ``(1, 1, 1)`` by default.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit, logsumexp

from .model import Context, PolicyTable
from .objectives import PreferencePair

STAGES = ("easy", "medium", "hard")
DEFAULT_PROPORTIONS = (0.25, 0.40, 0.35)
REPORT_COLUMNS = ("pair_id", "h_bar", "s_clip", "d_ot", "z_h", "z_s", "z_d", "score", "stage")


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final marginal residual {residual:.3e})")
        self.residual = residual


@dataclass
class ImageRecord:
    image_id: str
    embedding: np.ndarray
    patch_features: np.ndarray  # (m, d_p)
    patch_positions: np.ndarray  # (m, 2), in [0, 1]^2

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        self.patch_features = np.atleast_2d(np.asarray(self.patch_features, dtype=np.float64))
        self.patch_positions = np.atleast_2d(np.asarray(self.patch_positions, dtype=np.float64))

    def validate(self, max_patches: int | None = None) -> None:
        norm = float(np.linalg.norm(self.embedding))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"image {self.image_id}: embedding norm {norm} is not 1")
        m = self.patch_features.shape[0]
        if m < 1 or (max_patches is not None and m > max_patches):
            raise ValueError(f"image {self.image_id}: patch count {m} out of range")
        if self.patch_positions.shape != (m, 2):
            raise ValueError(f"image {self.image_id}: positions shape {self.patch_positions.shape}")
        if np.any(self.patch_positions < 0) or np.any(self.patch_positions > 1):
            raise ValueError(f"image {self.image_id}: patch position outside the unit square")

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and np.array_equal(self.embedding, other.embedding)
            and np.array_equal(self.patch_features, other.patch_features)
            and np.array_equal(self.patch_positions, other.patch_positions)
        )


@dataclass(frozen=True)
class OTParams:
    gamma: float = 1.0
    # entropic regularizer relative to the mean cost; 0 selects the exact LP
    epsilon_rel: float = 1e-3
    tol: float = 1e-10
    max_iter: int = 200_000


@dataclass(frozen=True)
class DifficultyWeights:
    h: float = 1.0
    s: float = 1.0
    d: float = 1.0


@dataclass(frozen=True)
class DifficultyRecord:
    pair_id: str
    h_bar: float
    s_clip: float
    d_ot: float
    z_h: float
    z_s: float
    z_d: float
    score: float


@dataclass
class CurriculumPlan:
    """Stage membership in canonical easy/medium/hard order.

    ``order_mode`` decides iteration order: ``forward``, ``reversed`` or
    ``shuffled:<seed>``.
    """

    stages: list[tuple[str, list[str]]]
    order_mode: str = "forward"
    proportions: tuple[float, float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for name, ids in self.stages:
            if not ids:
                raise ValueError(f"stage {name!r} is empty")
            overlap = seen.intersection(ids)
            if overlap:
                raise ValueError(f"stage {name!r} repeats pair ids {sorted(overlap)[:3]}")
            seen.update(ids)
        parse_order_mode(self.order_mode)

    def stage(self, name: str) -> list[str]:
        for stage_name, ids in self.stages:
            if stage_name == name:
                return ids
        raise KeyError(f"no stage named {name!r}")

    def with_order(self, order_mode: str) -> "CurriculumPlan":
        return CurriculumPlan(list(self.stages), order_mode, self.proportions, dict(self.meta))

    def ordered_stages(self) -> list[tuple[str, list[str]]]:
        kind, seed = parse_order_mode(self.order_mode)
        stages = list(self.stages)
        if kind == "reversed":
            stages.reverse()
        elif kind == "shuffled":
            order = np.random.default_rng(seed).permutation(len(stages))
            stages = [stages[i] for i in order]
        return stages

    def to_dict(self) -> dict:
        return {
            "format": "scpo-plan",
            "version": 1,
            "order_mode": self.order_mode,
            "proportions": list(self.proportions) if self.proportions else None,
            "stages": [{"name": n, "pair_ids": list(ids)} for n, ids in self.stages],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumPlan":
        if d.get("format") != "scpo-plan":
            raise ValueError("not a curriculum plan record")
        props = tuple(d["proportions"]) if d.get("proportions") else None
        stages = [(s["name"], list(s["pair_ids"])) for s in d["stages"]]
        return cls(stages, d.get("order_mode", "forward"), props, d.get("meta", {}))


def parse_order_mode(mode: str) -> tuple[str, int | None]:
    if mode in ("forward", "reversed"):
        return mode, None
    if mode.startswith("shuffled"):
        _, _, seed = mode.partition(":")
        return "shuffled", int(seed) if seed else 0
    raise ValueError(f"unknown order mode {mode!r}")


# -- raw metrics -----------------------------------------------------------


def binary_entropy(p: float) -> float:
    """Entropy in nats of a Bernoulli(p), with ``0 log 0 = 0``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    h = 0.0
    if p > 0.0:
        h -= p * math.log(p)
    if p < 1.0:
        h -= (1.0 - p) * math.log1p(-p)
    return h


def forced_choice_probability(policy: PolicyTable, c: Context, y_w, y_l) -> float:
    """``pi(y_w|c) / (pi(y_w|c) + pi(y_l|c))``."""
    row = policy.logits[policy.context_index(c)]
    return float(expit(row[policy.response_index(y_w)] - row[policy.response_index(y_l)]))


def mllm_uncertainty(policy: PolicyTable, pair: PreferencePair) -> float:
    c_w, c_l, _ = pair.contexts()
    y_w, y_l = pair.chosen_response, pair.rejected_response
    h_w = binary_entropy(forced_choice_probability(policy, c_w, y_w, y_l))
    h_l = binary_entropy(forced_choice_probability(policy, c_l, y_w, y_l))
    return 0.5 * (h_w + h_l)


def semantic_proximity(a: ImageRecord, b: ImageRecord) -> float:
    if a.embedding.shape != b.embedding.shape:
        raise ValueError(f"embedding dimensions differ: {a.embedding.shape} vs {b.embedding.shape}")
    return float(np.clip(np.dot(a.embedding, b.embedding), -1.0, 1.0))


def joint_cost(a: ImageRecord, b: ImageRecord, gamma: float) -> np.ndarray:
    """``C_ij = |f_i - f_j|^2 + gamma |pos_i - pos_j|^2``."""
    df = a.patch_features[:, None, :] - b.patch_features[None, :, :]
    dp = a.patch_positions[:, None, :] - b.patch_positions[None, :, :]
    return np.sum(df * df, axis=2) + gamma * np.sum(dp * dp, axis=2)


def exact_ot(a_w: np.ndarray, b_w: np.ndarray, cost: np.ndarray) -> tuple[float, np.ndarray]:
    """Exact transport cost and plan by linear programming."""
    n, m = cost.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(
        cost.ravel(),
        A_eq=a_eq,
        b_eq=np.concatenate([a_w, b_w]),
        bounds=(0, None),
        method="highs",
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(n, m)
    return float(np.sum(plan * cost)), plan


def _plan(f, g, cost, eps):
    return np.exp((f[:, None] + g[None, :] - cost) / eps)


def _marginal_residual(plan, a_w, b_w) -> float:
    return float(max(np.max(np.abs(plan.sum(axis=1) - a_w)), np.max(np.abs(plan.sum(axis=0) - b_w))))


def _dual_value(f, g, a_w, b_w, cost, eps) -> float:
    log_mass = logsumexp((f[:, None] + g[None, :] - cost) / eps)
    if log_mass > 700:
        return -math.inf
    return float(f @ a_w + g @ b_w - eps * math.exp(log_mass))


def _newton_polish(f, g, a_w, b_w, cost, eps, tol, max_steps=50):
    """Damped Newton ascent on the entropic dual; ``g[-1]`` is held fixed
    to remove the constant-shift null direction."""
    n, m = cost.shape
    for _ in range(max_steps):
        plan = _plan(f, g, cost, eps)
        row, col = plan.sum(axis=1), plan.sum(axis=0)
        if max(np.max(np.abs(row - a_w)), np.max(np.abs(col - b_w))) <= tol:
            break
        hess = np.zeros((n + m - 1, n + m - 1))
        hess[:n, :n] = np.diag(row)
        hess[:n, n:] = plan[:, :-1]
        hess[n:, :n] = plan[:, :-1].T
        hess[n:, n:] = np.diag(col[:-1])
        grad = np.concatenate([a_w - row, (b_w - col)[:-1]])
        # drop numerically null directions (components coupled only by
        # underflowing plan entries)
        step = eps * np.linalg.lstsq(hess, grad, rcond=1e-13)[0]
        df, dg = step[:n], np.append(step[n:], 0.0)
        base = _dual_value(f, g, a_w, b_w, cost, eps)
        base_res = _marginal_residual(plan, a_w, b_w)
        slope = float(grad @ step)
        t = 1.0
        while t > 1e-8:
            f_t, g_t = f + t * df, g + t * dg
            value = _dual_value(f_t, g_t, a_w, b_w, cost, eps)
            if value == -math.inf:
                t *= 0.5
                continue
            # near the optimum the dual gain drops below float resolution;
            # a shrinking marginal residual is then the acceptance test
            if value >= base + 1e-4 * t * slope or (
                _marginal_residual(_plan(f_t, g_t, cost, eps), a_w, b_w) < 0.5 * base_res
            ):
                break
            t *= 0.5
        else:
            break
        f, g = f + t * df, g + t * dg
    return f, g


def sinkhorn(
    a_w: np.ndarray,
    b_w: np.ndarray,
    cost: np.ndarray,
    epsilon: float,
    tol: float = 1e-10,
    max_iter: int = 200_000,
) -> np.ndarray:
    """Entropic transport plan by log-domain Sinkhorn with epsilon scaling.

    The regularizer is annealed geometrically from the cost scale down to
    ``epsilon``, warm-starting the dual potentials. At the target level a
    short run of Sinkhorn sweeps is followed by Newton steps on the same
    dual (same fixed point, quadratic local convergence); plain sweeps
    resume if Newton stalls. Stops when both marginal residuals are
    ``<= tol``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    log_a, log_b = np.log(a_w), np.log(b_w)
    f = np.zeros(cost.shape[0])
    g = np.zeros(cost.shape[1])
    levels = []
    eps = max(float(cost.max()), epsilon)
    while eps > epsilon:
        levels.append(eps)
        eps /= 4.0
    levels.append(epsilon)

    def sweep(f, g, eps):
        f = eps * (log_a - logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - cost) / eps, axis=0))
        return f, g

    iters = 0
    for eps in levels[:-1]:
        for _ in range(200):
            f, g = sweep(f, g, eps)
            iters += 1
            if iters % 10 == 0 and _marginal_residual(_plan(f, g, cost, eps), a_w, b_w) <= 1e-3:
                break

    eps = levels[-1]
    for _ in range(50):
        f, g = sweep(f, g, eps)
        iters += 1
    f, g = _newton_polish(f, g, a_w, b_w, cost, eps, tol)
    residual = _marginal_residual(_plan(f, g, cost, eps), a_w, b_w)
    while residual > tol:
        if iters >= max_iter:
            raise ConvergenceError(f"Sinkhorn did not converge in {max_iter} iterations", residual)
        f, g = sweep(f, g, eps)
        iters += 1
        if iters % 10 == 0:
            residual = _marginal_residual(_plan(f, g, cost, eps), a_w, b_w)
    return _plan(f, g, cost, eps)


def structural_discrepancy(
    a: ImageRecord,
    b: ImageRecord,
    gamma: float = 1.0,
    epsilon: float | None = None,
    tol: float = 1e-10,
    max_iter: int = 200_000,
) -> float:
    """Transport cost ``<T, C>`` between the patch sets of two images.

    ``epsilon=None`` uses ``1e-3 * mean(C)``; ``epsilon=0`` solves the
    exact linear program.
    """
    n, m = a.patch_features.shape[0], b.patch_features.shape[0]
    if n == 0 or m == 0:
        raise ValueError("patch sets must be non-empty")
    cost = joint_cost(a, b, gamma)
    a_w = np.full(n, 1.0 / n)
    b_w = np.full(m, 1.0 / m)
    if n == 1 or m == 1:
        # only one feasible plan
        return float(np.sum(cost * (a_w[:, None] * b_w[None, :])))
    if epsilon is None:
        epsilon = 1e-3 * float(cost.mean())
    if epsilon == 0 or cost.max() == 0:
        return max(exact_ot(a_w, b_w, cost)[0], 0.0)
    plan = sinkhorn(a_w, b_w, cost, epsilon, tol=tol, max_iter=max_iter)
    return float(np.sum(plan * cost))


# -- standardization, aggregation, partition ---------------------------------


def zscore_column(values: Sequence[float]) -> list[float]:
    """``(x - mean) / std`` with population std; all zeros if std < 1e-12."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot standardize an empty column")
    mu = math.fsum(x.tolist()) / x.size
    centered = x - mu
    sigma = math.sqrt(math.fsum((centered * centered).tolist()) / x.size)
    if sigma < 1e-12:
        return [0.0] * x.size
    return (centered / sigma).tolist()


def raw_metrics(
    policy: PolicyTable,
    pair: PreferencePair,
    images: dict[str, ImageRecord],
    ot: OTParams = OTParams(),
) -> tuple[float, float, float]:
    a, b = images[pair.chosen_image], images[pair.rejected_image]
    eps = ot.epsilon_rel * float(joint_cost(a, b, ot.gamma).mean())
    d = structural_discrepancy(a, b, ot.gamma, eps, ot.tol, ot.max_iter)
    return mllm_uncertainty(policy, pair), semantic_proximity(a, b), d


def difficulty_scores(
    policy: PolicyTable,
    pairs: Sequence[PreferencePair],
    images: dict[str, ImageRecord],
    weights: DifficultyWeights = DifficultyWeights(),
    ot: OTParams = OTParams(),
) -> list[DifficultyRecord]:
    """Raw metrics, per-column z-scores and weighted score, sorted by pair id."""
    if not pairs:
        raise ValueError("no pairs to score")
    for w in (weights.h, weights.s, weights.d):
        if not math.isfinite(w):
            raise ValueError("difficulty weights must be finite")
    ordered = sorted(pairs, key=lambda p: p.pair_id)
    raw = [raw_metrics(policy, p, images, ot) for p in ordered]
    h, s, d = (list(col) for col in zip(*raw))
    zh, zs, zd = zscore_column(h), zscore_column(s), zscore_column(d)
    return [
        DifficultyRecord(
            p.pair_id, h[i], s[i], d[i], zh[i], zs[i], zd[i],
            weights.h * zh[i] + weights.s * zs[i] + weights.d * zd[i],
        )
        for i, p in enumerate(ordered)
    ]


def partition(
    records: Sequence[DifficultyRecord],
    proportions: tuple[float, float, float] = DEFAULT_PROPORTIONS,
) -> CurriculumPlan:
    """Cut records sorted by ``(score, pair_id)`` into easy/medium/hard."""
    n = len(records)
    if n == 0:
        raise ValueError("cannot partition an empty record list")
    if len(proportions) != 3 or any(not p > 0 for p in proportions):
        raise ValueError(f"proportions must be three positive values, got {proportions}")
    if abs(sum(proportions) - 1.0) > 1e-9:
        raise ValueError(f"proportions sum to {sum(proportions)}, not 1")
    ordered = sorted(records, key=lambda r: (r.score, r.pair_id))
    # guard against n*p landing a hair below an integer
    cut1 = math.floor(n * proportions[0] + 1e-9)
    cut2 = math.floor(n * (proportions[0] + proportions[1]) + 1e-9)
    ids = [r.pair_id for r in ordered]
    groups = [ids[:cut1], ids[cut1:cut2], ids[cut2:]]
    stages = [(name, g) for name, g in zip(STAGES, groups) if g]
    return CurriculumPlan(stages, "forward", tuple(proportions))


def subsample_stage(plan: CurriculumPlan, stage: str, fraction: float, seed: int) -> CurriculumPlan:
    """Keep a seeded ``fraction`` of one stage's pairs (stage-size sweeps)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    stages = []
    for name, ids in plan.stages:
        if name == stage:
            k = max(1, math.floor(len(ids) * fraction + 1e-9))
            keep = np.sort(np.random.default_rng(seed).choice(len(ids), size=k, replace=False))
            ids = [ids[i] for i in keep]
        stages.append((name, ids))
    meta = {**plan.meta, f"{stage}_fraction": fraction}
    return CurriculumPlan(stages, plan.order_mode, plan.proportions, meta)


def stage_of(plan: CurriculumPlan) -> dict[str, str]:
    return {pid: name for name, ids in plan.stages for pid in ids}


def report_csv(records: Sequence[DifficultyRecord], plan: CurriculumPlan | None = None) -> str:
    """Difficulty report, one row per pair in the order of ``REPORT_COLUMNS``.

    Floats are written with ``repr`` (shortest round-trip form).
    """
    stages = stage_of(plan) if plan is not None else {}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in records:
        writer.writerow([
            r.pair_id, repr(r.h_bar), repr(r.s_clip), repr(r.d_ot),
            repr(r.z_h), repr(r.z_s), repr(r.z_d), repr(r.score), stages.get(r.pair_id, ""),
        ])
    return buf.getvalue()


def read_report_csv(text: str) -> list[DifficultyRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REPORT_COLUMNS:
        raise ValueError("difficulty report header mismatch")
    return [
        DifficultyRecord(r[0], *(float(x) for x in r[1:8]))
        for r in rows[1:]
    ]
