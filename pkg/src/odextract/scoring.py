"""Acquisition scores: per-target classification and localization
uncertainty, their per-sample aggregate, and the fitness score used to rank
retrieved search results."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detection import CandidateGroup
from .geometry import iou


@dataclass(frozen=True)
class UncertaintyScore:
    u_c: tuple[float, ...]
    u_p: tuple[float, ...]
    total: float


@dataclass(frozen=True)
class FitnessScore:
    value: float
    mean: float
    std: float
    size: float
    alpha: float

    def recompute(self) -> float:
        return self.alpha * self.mean + self.std * self.size


def top_two_margin(probs: np.ndarray) -> float:
    """Largest minus second-largest probability (second is 0 for one class)."""
    p = np.asarray(probs, dtype=float)
    if p.size == 0:
        raise ValueError("empty probability vector")
    c1 = int(np.argmax(p))
    rest = np.delete(p, c1)
    p2 = float(rest.max()) if rest.size else 0.0
    return float(p[c1]) - p2


def classification_uncertainty(g: CandidateGroup) -> float:
    margin = top_two_margin(g.primary.class_probs)
    return g.primary.objectness * (1.0 - margin) ** 2


def localization_uncertainty(g: CandidateGroup) -> float:
    b0 = g.primary.box
    return float(sum(1.0 - iou(b0, b) for b in g.candidates))


def score_groups(groups: Sequence[CandidateGroup]) -> UncertaintyScore:
    uc = tuple(classification_uncertainty(g) for g in groups)
    up = tuple(localization_uncertainty(g) for g in groups)
    return UncertaintyScore(uc, up, float(sum(a * b for a, b in zip(uc, up))))


def sample_uncertainty(groups: Sequence[CandidateGroup]) -> float:
    return score_groups(groups).total


def fitness_score(objectness_values: Sequence[float], size: float, alpha: float = 1.0) -> FitnessScore:
    """``alpha * mean(conf) + std(conf) * size`` with population std.

    An empty confidence list scores 0.
    """
    if size < 0:
        raise ValueError("size must be non-negative")
    conf = np.asarray(objectness_values, dtype=float)
    if conf.size == 0:
        mean = std = 0.0
    else:
        mean = float(conf.mean())
        std = float(conf.std())
    return FitnessScore(alpha * mean + std * size, mean, std, float(size), float(alpha))
