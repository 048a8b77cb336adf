"""Miniature dual encoder: a ViT-style image tower and a text tower.

Both towers are pre-LN transformers with frozen random weights. The image
tower accepts a stack of vision prompt blocks injected at layers 1..J; the
text tower always takes a learned prompt block in front of the class-name
tokens.
"""

from __future__ import annotations

import contextlib
import contextvars
import zlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .params import ParamStore
from .tensor import Node

PAD_ID = 0

_identity_attention = contextvars.ContextVar("identity_attention", default=False)


@contextlib.contextmanager
def identity_attention() -> Iterator[None]:
    """Test hook: every attention sublayer returns its own value rows."""
    token = _identity_attention.set(True)
    try:
        yield
    finally:
        _identity_attention.reset(token)


def template_ids(cfg: ModelConfig) -> np.ndarray:
    """Reserved token ids standing in for the hand-written "a photo of a" prefix."""
    return np.arange(1, cfg.b + 1)


@dataclass(frozen=True)
class ClassTokens:
    """Per-class token ids (K x name_len, right-padded with PAD_ID) and true lengths."""

    ids: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        lengths = np.asarray(self.lengths, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "lengths", lengths)
        if ids.ndim != 2 or lengths.shape != (ids.shape[0],):
            raise ValueError(f"ids {ids.shape} and lengths {lengths.shape} disagree")
        if np.any(lengths < 1):
            raise ValueError("every class needs at least one real token")
        if np.any(lengths > ids.shape[1]):
            raise ValueError("true length exceeds token slots")

    @property
    def K(self) -> int:
        return self.ids.shape[0]

    def subset(self, classes: Sequence[int]) -> "ClassTokens":
        classes = np.asarray(classes)
        return ClassTokens(self.ids[classes], self.lengths[classes])

    @classmethod
    def from_names(cls, names: Sequence[Sequence[int]], name_len: int) -> "ClassTokens":
        ids = np.full((len(names), name_len), PAD_ID, dtype=np.int64)
        for k, seq in enumerate(names):
            if len(seq) > name_len:
                raise ValueError(f"class {k} has {len(seq)} tokens, only {name_len} slots")
            ids[k, :len(seq)] = seq
        return cls(ids, np.array([len(s) for s in names]))


# --- backbone layout -----------------------------------------------------

def _block_spec(prefix: str, width: int, mlp_ratio: int) -> list[tuple[str, tuple, str]]:
    hidden = width * mlp_ratio
    return [
        (f"{prefix}.ln1.g", (width,), "ones"), (f"{prefix}.ln1.b", (width,), "zeros"),
        (f"{prefix}.attn.Wq", (width, width), "fan_in"), (f"{prefix}.attn.bq", (width,), "zeros"),
        (f"{prefix}.attn.Wk", (width, width), "fan_in"), (f"{prefix}.attn.bk", (width,), "zeros"),
        (f"{prefix}.attn.Wv", (width, width), "fan_in"), (f"{prefix}.attn.bv", (width,), "zeros"),
        (f"{prefix}.attn.Wo", (width, width), "fan_in"), (f"{prefix}.attn.bo", (width,), "zeros"),
        (f"{prefix}.ln2.g", (width,), "ones"), (f"{prefix}.ln2.b", (width,), "zeros"),
        (f"{prefix}.mlp.W1", (width, hidden), "fan_in"), (f"{prefix}.mlp.b1", (hidden,), "zeros"),
        (f"{prefix}.mlp.W2", (hidden, width), "fan_in"), (f"{prefix}.mlp.b2", (width,), "zeros"),
    ]


def backbone_spec(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init) for every frozen slot, in sampling order."""
    layout = [
        ("vis.patch_embed", (cfg.patch_dim, cfg.d_v), "fan_in"),
        ("vis.class_token", (cfg.d_v,), "unit"),
        ("vis.pos_embed", (1 + cfg.M_a, cfg.d_v), "unit"),
        ("vis.ln_pre.g", (cfg.d_v,), "ones"), ("vis.ln_pre.b", (cfg.d_v,), "zeros"),
    ]
    for i in range(cfg.L):
        layout += _block_spec(f"vis.layers.{i:02d}", cfg.d_v, cfg.mlp_ratio)
    layout += [
        ("vis.ln_post.g", (cfg.d_v,), "ones"), ("vis.ln_post.b", (cfg.d_v,), "zeros"),
        ("vis.proj", (cfg.d_v, cfg.d), "fan_in"),
        ("txt.token_embed", (cfg.vocab, cfg.d_l), "unit"),
        ("txt.pos_embed", (cfg.M_b, cfg.d_l), "unit"),
    ]
    for i in range(cfg.L):
        layout += _block_spec(f"txt.layers.{i:02d}", cfg.d_l, cfg.mlp_ratio)
    layout += [
        ("txt.ln_final.g", (cfg.d_l,), "ones"), ("txt.ln_final.b", (cfg.d_l,), "zeros"),
        ("txt.proj", (cfg.d_l, cfg.d), "fan_in"),
    ]
    return layout


def init_backbone(cfg: ModelConfig, seed: int | None = None) -> ParamStore:
    """Random stand-in for pretrained weights; every slot is frozen.

    Matrices are N(0, 1/fan_in); embeddings and the class token are N(0, 1)
    (a one-hot lookup has fan-in 1); layer-norm gains start at 1, biases at 0.
    """
    seed = cfg.seed if seed is None else seed
    store = ParamStore(seed)
    for name, shape, kind in backbone_spec(cfg):
        store.add(name, _sample_slot(name, shape, kind, seed), trainable=False)
    return store


def _sample_slot(name: str, shape: tuple, kind: str, seed: int) -> np.ndarray:
    # one stream per slot so any slot can be regenerated on its own
    rng = np.random.default_rng([seed, 0, zlib.crc32(name.encode())])
    if kind == "fan_in":
        return rng.standard_normal(shape) / np.sqrt(shape[0])
    if kind == "unit":
        return rng.standard_normal(shape)
    if kind == "ones":
        return np.ones(shape)
    return np.zeros(shape)


def token_embeddings(cfg: ModelConfig, seed: int | None = None) -> np.ndarray:
    """The frozen token-embedding table init_backbone would produce."""
    seed = cfg.seed if seed is None else seed
    return _sample_slot("txt.token_embed", (cfg.vocab, cfg.d_l), "unit", seed)


# --- transformer ---------------------------------------------------------

def _split_heads(h: Node, heads: int) -> Node:
    *lead, t, w = h.shape
    h = T.reshape(h, (*lead, t, heads, w // heads))
    n = h.ndim
    axes = list(range(n))
    axes[n - 3], axes[n - 2] = axes[n - 2], axes[n - 3]
    return T.transpose(h, axes)


def _merge_heads(h: Node) -> Node:
    n = h.ndim
    axes = list(range(n))
    axes[n - 3], axes[n - 2] = axes[n - 2], axes[n - 3]
    h = T.transpose(h, axes)
    *lead, t, heads, dh = h.shape
    return T.reshape(h, (*lead, t, heads * dh))


def transformer_block(h: Node, params: ParamStore, prefix: str, heads: int,
                      key_mask: np.ndarray | None = None) -> Node:
    """Pre-LN block: h + attn(ln1(h)), then + mlp(ln2(.)).

    ``key_mask`` is boolean with shape (..., T); False keys are never attended.
    """
    p = lambda k: params[f"{prefix}.{k}"]
    x = T.layer_norm(h, p("ln1.g"), p("ln1.b"))
    q = _split_heads(x @ p("attn.Wq") + p("attn.bq"), heads)
    k = _split_heads(x @ p("attn.Wk") + p("attn.bk"), heads)
    v = _split_heads(x @ p("attn.Wv") + p("attn.bv"), heads)
    mask = None
    if key_mask is not None:
        # (..., T) -> (..., 1 head, 1 query, T)
        mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    att = T.attention(q, k, v, mask=mask, identity=_identity_attention.get())
    h = h + (_merge_heads(att) @ p("attn.Wo") + p("attn.bo"))
    x = T.layer_norm(h, p("ln2.g"), p("ln2.b"))
    return h + (T.gelu(x @ p("mlp.W1") + p("mlp.b1")) @ p("mlp.W2") + p("mlp.b2"))


# --- image tower ---------------------------------------------------------

def encode_image(img, prompts: Sequence[Node] | None, params: ParamStore,
                 cfg: ModelConfig, return_tail: bool = False):
    """Project patches to one d-dimensional image feature.

    Token order is [class, prompts, patches]. Before layer j (j <= len(prompts))
    the prompt slots are overwritten by block j; the prompt outputs of the last
    injected layer are kept and flow on through the remaining layers like
    ordinary tokens. ``prompts=None`` or an empty stack runs the plain tower.

    With ``return_tail`` the result is ``(x, tail)`` where ``tail`` holds the
    prompt-position outputs of the final layer (None without prompts).
    """
    patches = np.asarray(img, dtype=np.float64)
    if patches.shape != (cfg.M_a, cfg.patch_dim):
        raise T.ShapeError(f"image must be {(cfg.M_a, cfg.patch_dim)}, got {patches.shape}")
    prompts = list(prompts or [])
    if prompts and len(prompts) != cfg.J:
        raise T.ShapeError(f"expected {cfg.J} vision prompt blocks, got {len(prompts)}")
    for j, block in enumerate(prompts):
        if block.shape != (cfg.a, cfg.d_v):
            raise T.ShapeError(f"vision prompt block {j} must be {(cfg.a, cfg.d_v)}, got {block.shape}")
    n_prompt = cfg.a if prompts else 0

    emb = T.constant(patches) @ params["vis.patch_embed"]
    cls = T.reshape(params["vis.class_token"], (1, cfg.d_v))
    h = T.concat([cls, emb], axis=0) + params["vis.pos_embed"]
    h = T.layer_norm(h, params["vis.ln_pre.g"], params["vis.ln_pre.b"])

    for layer in range(cfg.L):
        if layer < len(prompts):
            if layer == 0:
                h = T.concat([T.slice_axis(h, 0, 0, 1), prompts[0],
                              T.slice_axis(h, 0, 1, 1 + cfg.M_a)], axis=0)
            else:
                h = T.concat([T.slice_axis(h, 0, 0, 1), prompts[layer],
                              T.slice_axis(h, 0, 1 + n_prompt, 1 + n_prompt + cfg.M_a)], axis=0)
        h = transformer_block(h, params, f"vis.layers.{layer:02d}", cfg.heads)

    s = T.reshape(T.slice_axis(h, 0, 0, 1), (cfg.d_v,))
    s = T.layer_norm(s, params["vis.ln_post.g"], params["vis.ln_post.b"])
    x = s @ params["vis.proj"]
    if not return_tail:
        return x
    tail = T.slice_axis(h, 0, 1, 1 + n_prompt) if n_prompt else None
    return x, tail


# --- text tower ----------------------------------------------------------

def encode_text(classes: ClassTokens, prompt: Node, params: ParamStore,
                cfg: ModelConfig) -> Node:
    """Encode every class as [prompt, name tokens]; returns a K x d matrix.

    Pad slots are excluded from attention; each class is read out at its last
    real token.
    """
    if prompt.shape != (cfg.b, cfg.d_l):
        raise T.ShapeError(f"text prompt must be {(cfg.b, cfg.d_l)}, got {prompt.shape}")
    if classes.ids.shape[1] != cfg.name_len:
        raise T.ShapeError(f"class tokens need {cfg.name_len} slots, got {classes.ids.shape[1]}")
    if classes.ids.max() >= cfg.vocab:
        raise IndexError("class token id outside the vocabulary")
    K = classes.K

    names = T.embedding(params["txt.token_embed"], classes.ids)
    lead = T.broadcast_to(prompt, (K, cfg.b, cfg.d_l))
    h = T.concat([lead, names], axis=1) + params["txt.pos_embed"]
    real = np.arange(cfg.name_len)[None, :] < classes.lengths[:, None]
    key_mask = np.concatenate([np.ones((K, cfg.b), dtype=bool), real], axis=1)

    for layer in range(cfg.L):
        h = transformer_block(h, params, f"txt.layers.{layer:02d}", cfg.heads, key_mask)

    last = np.arange(K) * cfg.M_b + cfg.b + classes.lengths - 1
    w = T.embedding(T.reshape(h, (K * cfg.M_b, cfg.d_l)), last)
    w = T.layer_norm(w, params["txt.ln_final.g"], params["txt.ln_final.b"])
    return w @ params["txt.proj"]
