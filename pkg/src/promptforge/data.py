"""Synthetic few-shot classification tasks with a base/novel class split.

Class names are short random token sequences. Each class's image prototype
is a fixed random linear image of the mean of its name's token embeddings
(taken from the frozen text tower), so images and names share structure that
prompts and generators can learn to exploit, for base and novel classes
alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .config import ModelConfig
from .encoders import ClassTokens, token_embeddings

NAME_TOKENS = 3


@dataclass(frozen=True)
class Split:
    images: np.ndarray   # (n, M_a, patch_dim)
    labels: np.ndarray   # global class ids

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class SyntheticTask:
    classes: ClassTokens
    prototypes: np.ndarray
    base_ids: np.ndarray
    novel_ids: np.ndarray
    train: Split
    test_base: Split
    test_novel: Split
    seed: int
    noise: float

    @property
    def K(self) -> int:
        return self.classes.K

    @property
    def shots(self) -> int:
        return len(self.train) // len(self.base_ids)


def _class_names(rng: np.random.Generator, K: int, cfg: ModelConfig) -> list[tuple[int, ...]]:
    first, length = cfg.b + 1, min(NAME_TOKENS, cfg.name_len)
    pool = cfg.vocab - first
    if pool ** length < K:
        raise ValueError(f"vocab {cfg.vocab} cannot give {K} distinct names of length {length}")
    names: list[tuple[int, ...]] = []
    seen = set()
    while len(names) < K:
        name = tuple(int(t) for t in rng.integers(first, cfg.vocab, size=length))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def _sample(rng, prototypes, class_ids, per_class, noise) -> Split:
    labels = np.repeat(np.asarray(class_ids, dtype=np.int64), per_class)
    images = prototypes[labels] + noise * rng.standard_normal((len(labels),) + prototypes.shape[1:])
    return Split(images, labels)


def generate_task(seed: int, K: int, base_fraction: float, shots: int, noise: float,
                  cfg: ModelConfig, test_shots: int = 10) -> SyntheticTask:
    if K < 4:
        raise ValueError(f"need K >= 4, got {K}")
    if not 0 < base_fraction < 1:
        raise ValueError(f"base_fraction must be in (0, 1), got {base_fraction}")
    if shots < 1 or test_shots < 1:
        raise ValueError("shots and test_shots must be >= 1")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    n_base = int(round(K * base_fraction))
    if not 1 <= n_base <= K - 1:
        raise ValueError(f"split of {K} classes at {base_fraction} leaves an empty side")

    rng = np.random.default_rng([seed, 3])
    names = _class_names(rng, K, cfg)
    classes = ClassTokens.from_names(names, cfg.name_len)

    table = token_embeddings(cfg)
    semantic = np.stack([table[list(n)].mean(axis=0) for n in names])
    mixing = rng.standard_normal((cfg.d_l, cfg.M_a * cfg.patch_dim)) / np.sqrt(cfg.d_l)
    protos = (semantic @ mixing).reshape(K, cfg.M_a, cfg.patch_dim)
    protos /= np.sqrt((protos ** 2).mean(axis=(1, 2), keepdims=True))

    base_ids, novel_ids = np.arange(n_base), np.arange(n_base, K)
    return SyntheticTask(
        classes=classes,
        prototypes=protos,
        base_ids=base_ids,
        novel_ids=novel_ids,
        train=_sample(rng, protos, base_ids, shots, noise),
        test_base=_sample(rng, protos, base_ids, test_shots, noise),
        test_novel=_sample(rng, protos, novel_ids, test_shots, noise),
        seed=seed,
        noise=noise,
    )


def iterate_batches(split: Split, batch_size: int, seed: int, epoch: int = 0) -> Iterator[Split]:
    """Shuffled minibatches; the order depends only on (seed, epoch). The last partial batch is kept."""
    if len(split) == 0:
        raise ValueError("cannot batch an empty split")
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, 2, epoch]).permutation(len(split))
    for start in range(0, len(order), batch_size):
        yield split.take(order[start:start + batch_size])
