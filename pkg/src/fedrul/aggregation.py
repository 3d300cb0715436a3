"""Evaluation policies (full / random) and aggregation rules (FedAvg, best model, softmax)."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from fedrul.nn import ParameterVector

SCORE_FLOOR = 1e-12
SIGMA_FLOOR = 1e-12


class AggregationError(ValueError):
    pass


class AggregationMethod(str, enum.Enum):
    FEDAVG = "fedavg"
    RANDOM_BEST = "random-best"
    RANDOM_SOFTMAX = "random-softmax"
    FULL_BEST = "full-best"
    FULL_SOFTMAX = "full-softmax"

    @property
    def policy(self) -> str | None:
        """Validation policy: ``"full"``, ``"random"`` or ``None`` for FedAvg."""
        return None if self is AggregationMethod.FEDAVG else self.value.split("-")[0]

    @property
    def rule(self) -> str:
        return "fedavg" if self is AggregationMethod.FEDAVG else self.value.split("-")[1]


@dataclass(frozen=True)
class EvaluationScore:
    client_id: int
    score: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.score) or self.score < 0:
            raise AggregationError(f"client {self.client_id}: score must be finite and >= 0, got {self.score}")


def _stack(vectors: Sequence[ParameterVector]) -> np.ndarray:
    if not vectors:
        raise AggregationError("no parameter vectors to aggregate")
    n = len(vectors[0])
    if any(len(v) != n for v in vectors):
        raise AggregationError("parameter vectors differ in length")
    return np.stack([v.values for v in vectors]).astype(np.float64)


def weighted_average(vectors: Sequence[ParameterVector], weights: Sequence[float]) -> ParameterVector:
    stacked = _stack(vectors)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (stacked.shape[0],):
        raise AggregationError("one weight per vector required")
    return vectors[0].with_values(w @ stacked)


def fedavg_fractions(n_train: Sequence[int]) -> np.ndarray:
    n = np.asarray(n_train, dtype=np.float64)
    if n.size == 0 or np.any(n < 1):
        raise AggregationError("every client needs n_train >= 1")
    return n / n.sum()


def fedavg(params_list: Sequence[tuple[ParameterVector, int]]) -> ParameterVector:
    """Training-set-size weighted mean of the local models."""
    if not params_list:
        raise AggregationError("fedavg needs at least one client")
    vectors = [p for p, _ in params_list]
    return weighted_average(vectors, fedavg_fractions([n for _, n in params_list]))


def median(values: Sequence[float]) -> float:
    """Median with the even-count rule: mean of the two middle values."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise AggregationError("median of nothing")
    mid = v.size // 2
    return float(v[mid]) if v.size % 2 else float((v[mid - 1] + v[mid]) / 2.0)


def eval_full(losses, client_ids: Sequence[int] | None = None) -> list[EvaluationScore]:
    """Score model j by the median of ``losses[i][j]`` over every evaluator i."""
    L = np.asarray(losses, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or L.size == 0:
        raise AggregationError(f"full policy needs a square N x N loss matrix, got shape {L.shape}")
    if not np.all(np.isfinite(L)):
        raise AggregationError("loss matrix has missing or non-finite entries")
    ids = list(range(L.shape[0])) if client_ids is None else list(client_ids)
    return [EvaluationScore(ids[j], median(L[:, j])) for j in range(L.shape[1])]


def check_assignment(assignment: Mapping[int, int], derangement: bool = True) -> None:
    owners = set(assignment)
    evaluators = list(assignment.values())
    if set(evaluators) != owners or len(evaluators) != len(owners):
        raise AggregationError(f"assignment is not a bijection over the clients: {dict(assignment)}")
    if derangement and len(owners) >= 2 and any(j == i for j, i in assignment.items()):
        raise AggregationError(f"assignment gives a client its own model: {dict(assignment)}")


def eval_random(assignment: Mapping[int, int], losses: Mapping[int, float]) -> list[EvaluationScore]:
    """Score model j by the single loss reported by its assigned evaluator."""
    check_assignment(assignment)
    if set(losses) != set(assignment):
        raise AggregationError("need exactly one loss per assigned model")
    return [EvaluationScore(j, float(losses[j])) for j in assignment]


def draw_assignment(client_ids: Sequence[int], seed: int) -> dict[int, int]:
    """Uniform random derangement ``model owner -> evaluator`` by rejection sampling."""
    ids = list(client_ids)
    if len(ids) < 2:
        raise AggregationError("random validation needs at least 2 clients")
    rng = np.random.default_rng(seed)
    idx = np.arange(len(ids))
    while True:
        perm = rng.permutation(len(ids))
        if not np.any(perm == idx):
            return {ids[j]: ids[int(perm[j])] for j in range(len(ids))}


def softmax_weights(scores: Sequence[EvaluationScore]) -> dict[int, float]:
    """Softmax over z-scored inverse evaluation scores.

    Lower score means a better model, so each score is inverted first. The
    z-score uses the N-1 sample standard deviation; when every inverse score is
    the same the weights are uniform.
    """
    if len(scores) < 2:
        raise AggregationError("softmax weighting needs at least 2 clients")
    e = np.array([s.score for s in scores], dtype=np.float64)
    inv = 1.0 / np.maximum(e, SCORE_FLOOR)
    sigma = inv.std(ddof=1)
    if not sigma >= SIGMA_FLOOR:
        w = np.full(e.size, 1.0 / e.size)
    else:
        z = (inv - inv.mean()) / sigma
        ez = np.exp(z - z.max())
        w = ez / ez.sum()
    return {s.client_id: float(wi) for s, wi in zip(scores, w)}


def aggregate_softmax(params_list: Sequence[ParameterVector], weights: Sequence[float] | Mapping[int, float]) -> ParameterVector:
    if isinstance(weights, Mapping):
        weights = list(weights.values())
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9:
        raise AggregationError(f"weights must sum to 1, got {w.sum()!r}")
    return weighted_average(params_list, w)


def select_best(scores: Sequence[EvaluationScore], params_list: Sequence[ParameterVector]) -> tuple[ParameterVector, int]:
    """Model with the lowest score; ties go to the lowest client id."""
    if not scores:
        raise AggregationError("no scores to select from")
    if len(scores) != len(params_list):
        raise AggregationError("one parameter vector per score required")
    k = min(range(len(scores)), key=lambda i: (scores[i].score, scores[i].client_id))
    return params_list[k], scores[k].client_id
