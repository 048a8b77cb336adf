"""Base/novel accuracy, harmonic mean, and per-iteration confidence traces."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Split, SyntheticTask
from .encoders import ClassTokens
from .engine import EpisodeTrace, Model, forward_episode
from .tensor import no_grad


def harmonic_mean(base: float, new: float) -> float:
    """2 * base * new / (base + new), rounded to 2 decimals."""
    if base < 0 or new < 0:
        raise ValueError("accuracies must be non-negative")
    if base + new == 0:
        raise ValueError("harmonic mean undefined when both accuracies are 0")
    return round(2.0 * base * new / (base + new), 2)


@dataclass
class SplitResult:
    """Probabilities for every episode of one split, scored against that split's classes."""

    probs: np.ndarray    # (episodes, N+1, K)
    labels: np.ndarray   # positions within the split's class list

    @property
    def episodes(self) -> int:
        return len(self.labels)

    def accuracy(self, n: int = -1) -> float:
        pred = self.probs[:, n, :].argmax(axis=1)
        return 100.0 * float(np.mean(pred == self.labels))


@dataclass
class EvalReport:
    base_acc: float
    new_acc: float
    hm: float
    base_iter_acc: list[float]
    new_iter_acc: list[float]
    episodes: int

    @classmethod
    def from_results(cls, base: SplitResult, novel: SplitResult) -> "EvalReport":
        n_states = base.probs.shape[1]
        b = [round(base.accuracy(n), 2) for n in range(n_states)]
        v = [round(novel.accuracy(n), 2) for n in range(n_states)]
        return cls(b[-1], v[-1], _hm_or_zero(b[-1], v[-1]), b, v,
                   base.episodes + novel.episodes)


def _hm_or_zero(base: float, new: float) -> float:
    return 0.0 if base + new == 0 else harmonic_mean(base, new)


def _workers() -> int:
    raw = os.environ.get("PROMPTFORGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_split(model: Model, split: Split, classes: ClassTokens, class_ids: np.ndarray,
              N: int | None = None) -> SplitResult:
    """Run every episode of ``split``; results come back in episode order."""
    if len(split) == 0:
        raise ValueError("empty test split")
    position = {int(c): i for i, c in enumerate(class_ids)}
    labels = np.array([position[int(c)] for c in split.labels])

    def one(img) -> np.ndarray:
        with no_grad():
            return forward_episode(img, classes, model, N).probabilities()

    workers = _workers()
    if workers == 1:
        probs = [one(img) for img in split.images]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            probs = list(pool.map(one, split.images))
    return SplitResult(np.stack(probs), labels)


def evaluate_splits(model: Model, task: SyntheticTask, N: int | None = None) -> tuple[SplitResult, SplitResult]:
    base = run_split(model, task.test_base, task.classes.subset(task.base_ids), task.base_ids, N)
    novel = run_split(model, task.test_novel, task.classes.subset(task.novel_ids), task.novel_ids, N)
    return base, novel


def evaluate(model: Model, task: SyntheticTask, N: int | None = None) -> EvalReport:
    """Final-iteration accuracy on base and novel test episodes.

    Base episodes are scored against the base classes and novel episodes
    against the novel classes.
    """
    return EvalReport.from_results(*evaluate_splits(model, task, N))


def trace_episode(model: Model, img, classes: ClassTokens, N: int | None = None) -> EpisodeTrace:
    with no_grad():
        return forward_episode(img, classes, model, N)


def confidence_gain_fraction(*results: SplitResult, start: int = 1, stop: int = 2) -> float:
    """Among correctly classified episodes (pooled over ``results``), the share whose
    true-class probability does not drop between iterations ``start`` and ``stop``."""
    gains = []
    for result in results:
        final = result.probs[:, -1, :].argmax(axis=1)
        correct = np.flatnonzero(final == result.labels)
        y = result.labels[correct]
        gains.append(result.probs[correct, stop, y] >= result.probs[correct, start, y])
    gains = np.concatenate(gains) if gains else np.zeros(0, dtype=bool)
    return float(np.mean(gains)) if gains.size else 0.0
