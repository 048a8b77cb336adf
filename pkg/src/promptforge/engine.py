"""Initialization, iterative evolution steps, the weighted loss and training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import Split, SyntheticTask, iterate_batches
from .encoders import ClassTokens, encode_image, encode_text, init_backbone
from .filter import ClassProbabilities, FilteredFeatures, class_probabilities, select_top_a
from .params import ParamStore, sgd_step
from .promptgen import (BasePrompts, TextGenerator, VisionGenerator, bind_generators,
                        gen_text_prompt, gen_vision_prompts, init_generators)
from .tensor import Node

log = logging.getLogger(__name__)


@dataclass
class Model:
    cfg: ModelConfig
    params: ParamStore
    vgen: VisionGenerator
    tgen: TextGenerator
    base: BasePrompts

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int | None = None) -> "Model":
        seed = cfg.seed if seed is None else seed
        params = init_backbone(cfg, seed)
        vgen, tgen, base = init_generators(cfg, params, seed)
        return cls(cfg, params, vgen, tgen, base)

    @classmethod
    def from_params(cls, cfg: ModelConfig, params: ParamStore) -> "Model":
        return cls(cfg, params, *bind_generators(cfg, params))

    def with_config(self, **changes) -> "Model":
        """Same parameters, different run-time settings (N, lambda, tau, ablate)."""
        cfg = self.cfg.replace(**changes)
        shape_keys = {"d", "d_v", "d_l", "L", "heads", "M_a", "M_b", "vocab", "a", "b", "J",
                      "mlp_ratio", "patch_dim"}
        if shape_keys & set(changes):
            raise ValueError(f"cannot change shape-defining keys {sorted(shape_keys & set(changes))}")
        return Model(cfg, self.params, self.vgen, self.tgen, self.base)


@dataclass
class IterationState:
    n: int
    x: Node
    Z: Node
    probs: ClassProbabilities
    filtered: FilteredFeatures
    vprompts: list[Node]
    tprompt: Node


@dataclass
class EpisodeTrace:
    states: list[IterationState]
    label: int | None = None

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final(self) -> IterationState:
        return self.states[-1]

    def probabilities(self) -> np.ndarray:
        """(N+1) x K array of class probabilities per iteration."""
        return np.stack([s.probs.values for s in self.states])


def _filter(x: Node, Z: Node, cfg: ModelConfig) -> tuple[ClassProbabilities, FilteredFeatures]:
    probs = class_probabilities(x, Z, cfg.tau)
    if "filter" in cfg.ablated:
        # no relevance ranking: the first a classes in class order
        return probs, select_top_a(-np.arange(Z.shape[0], dtype=float), Z, cfg.a)
    return probs, select_top_a(probs, Z, cfg.a)


def initialize(img, classes: ClassTokens, model: Model) -> IterationState:
    """n = 0: the plain dual encoder with the base text prompt, then the filter."""
    cfg = model.cfg
    x = encode_image(img, None, model.params, cfg)
    Z = encode_text(classes, model.base.text, model.params, cfg)
    probs, filtered = _filter(x, Z, cfg)
    return IterationState(0, x, Z, probs, filtered, list(model.base.vision), model.base.text)


def mie_step(prev: IterationState, img, classes: ClassTokens, model: Model) -> IterationState:
    """One evolution step: vision prompts, image, text prompt, text, filter (in that order)."""
    cfg = model.cfg
    if "vgen" in cfg.ablated:
        vprompts = prev.vprompts
    else:
        vprompts = gen_vision_prompts(prev.filtered.rows, prev.vprompts, model.vgen)
    x = encode_image(img, vprompts, model.params, cfg)
    tprompt = prev.tprompt if "tgen" in cfg.ablated else gen_text_prompt(x, prev.tprompt, model.tgen)
    Z = encode_text(classes, tprompt, model.params, cfg)
    probs, filtered = _filter(x, Z, cfg)
    return IterationState(prev.n + 1, x, Z, probs, filtered, vprompts, tprompt)


def forward_episode(img, classes: ClassTokens, model: Model, N: int | None = None,
                    label: int | None = None) -> EpisodeTrace:
    N = model.cfg.N if N is None else N
    if N < 0:
        raise ValueError(f"N must be >= 0, got {N}")
    if classes.K < model.cfg.a:
        raise ValueError(f"{classes.K} candidate classes cannot fill a={model.cfg.a} filter slots")
    states = [initialize(img, classes, model)]
    for _ in range(N):
        states.append(mie_step(states[-1], img, classes, model))
    return EpisodeTrace(states, label)


def iteration_losses(trace: EpisodeTrace, y: int) -> list[Node]:
    """Cross-entropy of the true class at every iteration n = 0..N."""
    return [T.cross_entropy_from_log_probs(T.log_softmax(s.probs.logits), y) for s in trace.states]


def loss_weights(lam: float, N: int) -> np.ndarray:
    """lambda^(N - n) for n = 1..N."""
    return np.array([float(lam) ** (N - n) for n in range(1, N + 1)])


def weighted_loss(losses, lam: float):
    """sum_n lambda^(N-n) * losses[n-1] over n = 1..N; works on floats or Nodes."""
    N = len(losses)
    if N == 0:
        raise ValueError("no iterations to weight (N must be >= 1)")
    total = None
    for w, term in zip(loss_weights(lam, N), losses):
        term = term * float(w)
        total = term if total is None else total + term
    return total


def episode_loss(trace: EpisodeTrace, y: int, lam: float, N: int | None = None) -> Node:
    """The lambda-weighted sum of per-iteration cross-entropies, excluding n = 0."""
    N = len(trace) - 1 if N is None else N
    if len(trace) != N + 1:
        raise ValueError(f"trace has {len(trace)} states, expected N+1 = {N + 1}")
    if N < 1:
        raise ValueError("episode loss needs N >= 1; the n = 0 state is not optimized")
    return weighted_loss(iteration_losses(trace, y)[1:], lam)


# --- training ------------------------------------------------------------

@dataclass
class History:
    epoch_loss: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float]]:
        return list(enumerate(self.epoch_loss, 1))


def batch_loss(model: Model, batch: Split, classes: ClassTokens, class_ids: np.ndarray) -> tuple[Node, float]:
    """Mean episode loss over a minibatch; labels are positions within ``class_ids``."""
    position = {int(c): i for i, c in enumerate(class_ids)}
    total = None
    for img, label in zip(batch.images, batch.labels):
        y = position[int(label)]
        trace = forward_episode(img, classes, model, label=y)
        loss = episode_loss(trace, y, model.cfg.lam)
        total = loss if total is None else total + loss
    mean = total * (1.0 / len(batch))
    return mean, mean.item()


def train(task: SyntheticTask, cfg: ModelConfig, train_cfg: TrainConfig,
          seed: int | None = None, model: Model | None = None) -> tuple[Model, History]:
    """Minibatch SGD over base-class episodes; only generators and base prompts move.

    Each training episode scores an image against the base classes only.
    """
    seed = cfg.seed if seed is None else seed
    if len(task.train) == 0:
        raise ValueError("empty training set")
    if cfg.N < 1 and train_cfg.epochs > 0:
        raise ValueError("training needs N >= 1")
    model = Model.build(cfg, seed) if model is None else model
    classes = task.classes.subset(task.base_ids)
    history = History()
    for epoch in range(train_cfg.epochs):
        losses, sizes = [], []
        for batch in iterate_batches(task.train, train_cfg.batch, seed, epoch):
            model.params.zero_grad()
            loss, value = batch_loss(model, batch, classes, task.base_ids)
            T.backward(loss)
            sgd_step(model.params, train_cfg.lr)
            losses.append(value)
            sizes.append(len(batch))
        mean = float(np.dot(losses, sizes) / np.sum(sizes))
        history.epoch_loss.append(mean)
        log.info("epoch %d: mean loss %.6g", epoch + 1, mean)
    return model, history
