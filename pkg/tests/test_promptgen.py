import numpy as np
import pytest

from promptforge import tensor as T
from promptforge.config import ModelConfig
from promptforge.encoders import init_backbone, template_ids
from promptforge.params import ParamStore
from promptforge.promptgen import (TextGenerator, VisionGenerator, bind_generators, gen_text_prompt,
                                   gen_vision_prompts, init_generators)

rng = np.random.default_rng(11)


def const(shape, fill=None):
    return T.constant(np.zeros(shape) if fill == 0 else rng.standard_normal(shape))


def vision_gen(d, h, d_v, J, fill=None):
    return VisionGenerator(const((d, h), fill), const((h, d_v), fill),
                           [const((h,), fill) for _ in range(J)], [const((d_v,), fill) for _ in range(J)])


def text_gen(d, h, d_l, fill=None):
    return TextGenerator(const((d, h), fill), const((h,), fill), const((h, d_l), fill), const((d_l,), fill))


def test_zero_vision_generator_is_identity():
    prev = [const((3, 5)) for _ in range(2)]
    out = gen_vision_prompts(const((3, 4)), prev, vision_gen(4, 2, 5, 2, fill=0))
    for o, p in zip(out, prev):
        np.testing.assert_array_equal(o.value, p.value)


def test_zero_text_generator_is_identity():
    prev = const((2, 5))
    np.testing.assert_array_equal(gen_text_prompt(const((4,)), prev, text_gen(4, 2, 5, fill=0)).value, prev.value)


def test_published_shapes():
    cfg = ModelConfig()
    h = cfg.gen_hidden
    prev = [const((cfg.a, cfg.d_v), 0) for _ in range(cfg.J)]
    blocks = gen_vision_prompts(const((cfg.a, cfg.d)), prev, vision_gen(cfg.d, h, cfg.d_v, cfg.J))
    assert len(blocks) == 9 and all(b.shape == (8, 768) for b in blocks)
    text = gen_text_prompt(const((cfg.d,)), const((cfg.b, cfg.d_l), 0), text_gen(cfg.d, h, cfg.d_l))
    assert text.shape == (5, 512)


def test_vision_generator_dense_oracle():
    gen = vision_gen(6, 3, 4, 2)
    Zf, prev = rng.standard_normal((2, 6)), [rng.standard_normal((2, 4)) for _ in range(2)]
    out = gen_vision_prompts(T.constant(Zf), [T.constant(p) for p in prev], gen)
    for j in range(2):
        ref = np.empty((2, 4))
        for r in range(2):
            hid = np.maximum(0, Zf[r] @ gen.W1.value + gen.b1[j].value)
            ref[r] = hid @ gen.W2.value + gen.b2[j].value + prev[j][r]
        np.testing.assert_allclose(out[j].value, ref, rtol=0, atol=1e-12)


def test_text_generator_dense_oracle():
    gen = text_gen(6, 3, 4)
    x, prev = rng.standard_normal(6), rng.standard_normal((3, 4))
    out = gen_text_prompt(T.constant(x), T.constant(prev), gen)
    delta = np.maximum(0, x @ gen.W1.value + gen.b1.value) @ gen.W2.value + gen.b2.value
    np.testing.assert_allclose(out.value, prev + delta[None, :], rtol=0, atol=1e-12)


def test_published_vision_generator_parameter_count():
    cfg = ModelConfig()
    gen = vision_gen(cfg.d, cfg.gen_hidden, cfg.d_v, cfg.J, fill=0)
    assert gen.num_params() == 512 * 32 + 32 * 768 + 9 * (32 + 768)


def test_shape_mismatches():
    gen = vision_gen(4, 2, 5, 2)
    with pytest.raises(T.ShapeError):
        gen_vision_prompts(const((2, 4)), [const((3, 5))] * 2, gen)
    with pytest.raises(T.ShapeError):
        gen_vision_prompts(const((3, 4)), [const((3, 5))], gen)
    with pytest.raises(T.ShapeError):
        gen_text_prompt(const((3,)), const((2, 5)), text_gen(4, 2, 5))


def test_init_generators(toy_cfg):
    store = init_backbone(toy_cfg)
    frozen = {k for k, _ in store.items()}
    vgen, tgen, base = init_generators(toy_cfg, store)
    added = [(k, p) for k, p in store.items() if k not in frozen]
    assert added and all(p.trainable for _, p in added)
    assert all(np.all(b.value == 0) for b in base.vision)
    np.testing.assert_array_equal(base.text.value, store["txt.token_embed"].value[template_ids(toy_cfg)])
    # one shared pair of matrices, one bias pair per injected layer
    assert len(vgen.b1) == len(vgen.b2) == toy_cfg.J
    assert vgen.W1.shape == (toy_cfg.d, toy_cfg.gen_hidden)


def test_bind_generators_views_same_slots(toy_cfg):
    store = init_backbone(toy_cfg)
    vgen, tgen, base = init_generators(toy_cfg, store)
    vgen2, tgen2, base2 = bind_generators(toy_cfg, store)
    assert vgen2.W1 is vgen.W1 and tgen2.b2 is tgen.b2 and base2.vision[1] is base.vision[1]


def test_init_is_seeded(toy_cfg):
    snaps = []
    for _ in range(2):
        store = init_backbone(toy_cfg)
        init_generators(toy_cfg, store, seed=9)
        snaps.append(store.snapshot())
    assert all(snaps[0][k].tobytes() == snaps[1][k].tobytes() for k in snaps[0])


def test_blocks_differ_only_through_biases():
    gen = vision_gen(6, 3, 4, 3)
    for j in range(3):
        gen.b1[j], gen.b2[j] = gen.b1[0], gen.b2[0]
    prev = [const((2, 4), 0) for _ in range(3)]
    out = gen_vision_prompts(const((2, 6)), prev, gen)
    assert out[0].value.tobytes() == out[1].value.tobytes() == out[2].value.tobytes()
