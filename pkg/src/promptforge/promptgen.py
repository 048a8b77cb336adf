"""Conditional prompt generators and the learned base prompts.

The vision generators share two weight matrices and differ only in their
per-layer biases. Each maps the filtered text features row by row
(d -> d/16 -> d_v) to a block of vision prompts. The single text generator
maps the image feature (d -> d/16 -> d_l) to one vector that is added to every
row of the text prompt. Both add their output to the previous iteration's
prompts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoders import template_ids
from .params import Param, ParamStore
from .tensor import Node


@dataclass
class VisionGenerator:
    W1: Param
    W2: Param
    b1: list[Param]
    b2: list[Param]

    def num_params(self) -> int:
        return self.W1.value.size + self.W2.value.size + sum(
            b.value.size for b in self.b1 + self.b2)


@dataclass
class TextGenerator:
    W1: Param
    b1: Param
    W2: Param
    b2: Param


@dataclass
class BasePrompts:
    text: Param
    vision: list[Param]


def _mlp(inp: Node, W1: Node, b1: Node, W2: Node, b2: Node) -> Node:
    return T.relu(inp @ W1 + b1) @ W2 + b2


def gen_vision_prompts(filtered: Node, prev: list[Node], gen: VisionGenerator) -> list[Node]:
    """Block j = relu(filtered @ W1 + b1_j) @ W2 + b2_j + prev[j]."""
    a = prev[0].shape[0] if prev else None
    if filtered.ndim != 2 or filtered.shape[0] != a:
        raise T.ShapeError(f"need {a} filtered rows, got shape {filtered.shape}")
    if len(prev) != len(gen.b1):
        raise T.ShapeError(f"{len(prev)} previous blocks for {len(gen.b1)} generator layers")
    return [_mlp(filtered, gen.W1, b1, gen.W2, b2) + o
            for b1, b2, o in zip(gen.b1, gen.b2, prev)]


def gen_text_prompt(x: Node, prev: Node, gen: TextGenerator) -> Node:
    if x.shape != (gen.W1.shape[0],):
        raise T.ShapeError(f"image feature must be {(gen.W1.shape[0],)}, got {x.shape}")
    if prev.ndim != 2 or prev.shape[1] != gen.W2.shape[1]:
        raise T.ShapeError(f"text prompt width {prev.shape} does not match generator {gen.W2.shape}")
    # one vector, broadcast over the b prompt rows
    return prev + _mlp(x, gen.W1, gen.b1, gen.W2, gen.b2)


def init_generators(cfg: ModelConfig, params: ParamStore,
                    seed: int | None = None) -> tuple[VisionGenerator, TextGenerator, BasePrompts]:
    """Add trainable generator and base-prompt slots to ``params``.

    Weights are N(0, 1/fan_in), biases zero, vision base prompts zero, and the
    text base prompt is a copy of the template-token embeddings.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    h = cfg.gen_hidden

    def weight(name, shape):
        return params.add(name, rng.standard_normal(shape) / np.sqrt(shape[0]), trainable=True)

    def zeros(name, shape):
        return params.add(name, np.zeros(shape), trainable=True)

    vgen = VisionGenerator(
        W1=weight("gen.vision.W1", (cfg.d, h)),
        W2=weight("gen.vision.W2", (h, cfg.d_v)),
        b1=[zeros(f"gen.vision.b1.{j:02d}", (h,)) for j in range(cfg.J)],
        b2=[zeros(f"gen.vision.b2.{j:02d}", (cfg.d_v,)) for j in range(cfg.J)],
    )
    tgen = TextGenerator(
        W1=weight("gen.text.W1", (cfg.d, h)),
        b1=zeros("gen.text.b1", (h,)),
        W2=weight("gen.text.W2", (h, cfg.d_l)),
        b2=zeros("gen.text.b2", (cfg.d_l,)),
    )
    template = params["txt.token_embed"].value[template_ids(cfg)]
    base = BasePrompts(
        text=params.add("prompt.text", template, trainable=True),
        vision=[zeros(f"prompt.vision.{j:02d}", (cfg.a, cfg.d_v)) for j in range(cfg.J)],
    )
    return vgen, tgen, base


def bind_generators(cfg: ModelConfig, params: ParamStore) -> tuple[VisionGenerator, TextGenerator, BasePrompts]:
    """Typed views over generator slots already present in ``params``."""
    vgen = VisionGenerator(
        W1=params["gen.vision.W1"], W2=params["gen.vision.W2"],
        b1=[params[f"gen.vision.b1.{j:02d}"] for j in range(cfg.J)],
        b2=[params[f"gen.vision.b2.{j:02d}"] for j in range(cfg.J)],
    )
    tgen = TextGenerator(params["gen.text.W1"], params["gen.text.b1"],
                         params["gen.text.W2"], params["gen.text.b2"])
    base = BasePrompts(params["prompt.text"],
                       [params[f"prompt.vision.{j:02d}"] for j in range(cfg.J)])
    return vgen, tgen, base
