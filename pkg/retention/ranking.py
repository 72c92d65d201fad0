"""Linear ensemble ranking: an action weights the per-channel scores of every candidate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from retention.core import ActionVector, CandidateVideo, DimensionError, InsufficientSamplesError

DEFAULT_SLATE_SIZE = 6

Weights = Union[ActionVector, np.ndarray, Sequence[float]]


@dataclass(frozen=True)
class Slate:
    video_ids: Tuple[int, ...]
    ranking_scores: np.ndarray

    def __len__(self) -> int:
        return len(self.video_ids)


def _weights(a: Weights) -> np.ndarray:
    return a.values if isinstance(a, ActionVector) else np.asarray(a, dtype=np.float64)


def ranking_score(a: Weights, x: CandidateVideo) -> float:
    w = _weights(a)
    if w.shape != x.scores.shape:
        raise DimensionError(f"action has {w.size} weights but video {x.video_id} has {x.scores.size} scores")
    return float(w @ x.scores)


def ranking_scores(a: Weights, score_matrix: np.ndarray) -> np.ndarray:
    """Scores for a (m, n) matrix of candidate score vectors."""
    w = _weights(a)
    if score_matrix.ndim != 2 or score_matrix.shape[1] != w.size:
        raise DimensionError(f"score matrix {score_matrix.shape} incompatible with {w.size} weights")
    return score_matrix @ w


def top_k(scores: np.ndarray, video_ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best scores; ties go to the smaller video id."""
    if len(scores) < k:
        raise InsufficientSamplesError(f"need at least {k} candidates, got {len(scores)}")
    order = np.lexsort((video_ids, -scores))
    return order[:k]


def select_slate(a: Weights, candidates: Sequence[CandidateVideo], k: int = DEFAULT_SLATE_SIZE) -> Slate:
    if len(candidates) < k:
        raise InsufficientSamplesError(f"need at least {k} candidates, got {len(candidates)}")
    matrix = np.stack([c.scores for c in candidates])
    ids = np.array([c.video_id for c in candidates])
    scores = ranking_scores(a, matrix)
    picked = top_k(scores, ids, k)
    return Slate(video_ids=tuple(int(i) for i in ids[picked]), ranking_scores=scores[picked])
