import dataclasses
from unittest.mock import patch

import numpy as np
import pytest

from dedetr import tensor as T
from dedetr.errors import ShapeError
from dedetr.scenes import gen_scene
from dedetr.sampling import build_multiscale_kv
from dedetr.selftest import aligned_attention_gap, model_gradient_error
from dedetr.selftest import tiny_config as make_config
from dedetr.tensor import Tensor
from dedetr.transformer import (
    DetectionTransformer,
    MultiHeadAttention,
    ParamFactory,
    initial_reference_grid,
)


@pytest.fixture
def model(tiny_config):
    return DetectionTransformer(tiny_config.model, seed=3)


@pytest.fixture
def scene(tiny_spec):
    return gen_scene(tiny_spec, 0)


def test_forward_shapes(model, scene, tiny_config):
    with T.no_grad():
        outputs = model(scene.pyramid)
    cfg = tiny_config.model
    assert len(outputs) == cfg.dec_layers
    for out in outputs:
        assert out.class_logits.dims == (cfg.num_queries, cfg.num_classes + 1)
        assert out.boxes.dims == (cfg.num_queries, 4)
        assert np.allclose(out.class_probs.data.sum(axis=1), 1.0)
        assert np.all((out.boxes.data > 0) & (out.boxes.data < 1))
        assert len(out.box_list()) == cfg.num_queries


def test_same_seed_same_parameters(tiny_config):
    a = DetectionTransformer(tiny_config.model, seed=5).state_dict()
    b = DetectionTransformer(tiny_config.model, seed=5).state_dict()
    c = DetectionTransformer(tiny_config.model, seed=6).state_dict()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_parameter_names_are_unique(model):
    names = [name for name, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert "decoder.1.cross_attn.q_proj.weight" in names
    assert "reference_logits" in names
    assert model.num_parameters() == sum(p.data.size for p in model.parameters())


def test_load_state_dict_round_trip(model, tiny_config):
    other = DetectionTransformer(tiny_config.model, seed=99)
    other.load_state_dict(model.state_dict())
    for (name, p), (_, q) in zip(model.named_parameters(), other.named_parameters()):
        assert np.array_equal(p.data, q.data), name


def test_load_state_dict_mismatch(model):
    state = model.state_dict()
    state["query_pos"] = np.zeros((1, 1))
    with pytest.raises(ShapeError):
        model.load_state_dict(state)
    state = model.state_dict()
    del state["query_pos"]
    with pytest.raises(ShapeError):
        model.load_state_dict(state)


def test_pyramid_level_mismatch(scene, tiny_config):
    two_levels = dataclasses.replace(tiny_config.model, num_levels=2, levels_used=(0, 1))
    model = DetectionTransformer(two_levels)
    with pytest.raises(ShapeError):
        model(scene.pyramid)


def test_attention_mask_blocks_keys(rng):
    attn = MultiHeadAttention(8, 2, ParamFactory(0))
    q = Tensor(rng.normal(size=(3, 8)))
    kv = Tensor(rng.normal(size=(5, 8)))
    mask = np.ones((3, 5), dtype=bool)
    mask[:, 2] = False
    with T.no_grad():
        attn(q, kv, kv, mask=mask)
    assert np.allclose(attn.last_weights[..., 2], 0.0)
    assert np.allclose(attn.last_weights.sum(axis=-1), 1.0)


def test_attention_rejects_wrong_width(rng):
    attn = MultiHeadAttention(8, 2, ParamFactory(0))
    with pytest.raises(ShapeError):
        attn(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 8))),
             Tensor(rng.normal(size=(5, 8))))
    with pytest.raises(ShapeError):
        MultiHeadAttention(10, 4, ParamFactory(0))


def test_sparse_attention_equals_masked_dense_on_aligned_boxes():
    with T.no_grad():
        assert aligned_attention_gap() < 1e-6


def test_dense_only_decoder_skips_sampling(scene):
    model = DetectionTransformer(make_config(sparse_sampling=False).model)
    with patch("dedetr.transformer.build_multiscale_kv") as sample, T.no_grad():
        model(scene.pyramid)
    sample.assert_not_called()


def test_sparse_decoder_samples_configured_levels(scene):
    model = DetectionTransformer(make_config(multiscale=False).model)
    with patch("dedetr.transformer.build_multiscale_kv", wraps=build_multiscale_kv) as sample, \
            T.no_grad():
        model(scene.pyramid)
    assert sample.call_count == 1
    assert sample.call_args[0][3] == [2]


def test_frozen_boxes_reproduce_forward(model, scene):
    frozen = model.sampling_boxes(scene.pyramid)
    assert len(frozen) == 1
    with T.no_grad():
        free = model(scene.pyramid)
        fixed = model(scene.pyramid, frozen)
    for a, b in zip(free, fixed):
        assert np.allclose(a.boxes.data, b.boxes.data)


def test_refinement_toggle_changes_boxes(scene):
    with T.no_grad():
        on = DetectionTransformer(make_config(box_refine=True).model, seed=1)(scene.pyramid)
        off = DetectionTransformer(make_config(box_refine=False).model, seed=1)(scene.pyramid)
    assert not np.allclose(on[0].boxes.data, off[0].boxes.data)


def test_initial_reference_grid():
    grid = initial_reference_grid(4)
    assert grid.shape == (4, 4)
    assert grid[0] == pytest.approx((0.25, 0.25, 0.5, 0.5))
    assert grid[3] == pytest.approx((0.75, 0.75, 0.5, 0.5))


def test_model_gradient_matches_finite_differences(tiny_config):
    assert model_gradient_error(tiny_config, coords=8) < 1e-3


def naive_single_head_attention(attn, q, k, v, q_pos, k_pos):
    """Loop-by-loop reference for one head."""
    def project(layer, row):
        return row @ layer.weight.data + layer.bias.data

    dim = q.shape[1]
    out = np.zeros_like(q)
    for i in range(q.shape[0]):
        qi = project(attn.q_proj, q[i] + q_pos[i])
        scores = []
        for j in range(k.shape[0]):
            kj = project(attn.k_proj, k[j] + k_pos[j])
            scores.append(sum(qi[d] * kj[d] for d in range(dim)) / np.sqrt(dim))
        top = max(scores)
        exps = [np.exp(s - top) for s in scores]
        total = sum(exps)
        ctx = sum(exps[j] / total * project(attn.v_proj, v[j]) for j in range(k.shape[0]))
        out[i] = project(attn.out_proj, ctx)
    return out


def test_single_head_attention_matches_naive_loops(rng):
    attn = MultiHeadAttention(8, 1, ParamFactory(4))
    q, q_pos = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    k, k_pos, v = rng.normal(size=(5, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    with T.no_grad():
        got = attn(Tensor(q), Tensor(k), Tensor(v), Tensor(q_pos), Tensor(k_pos)).data
    want = naive_single_head_attention(attn, q, k, v, q_pos, k_pos)
    assert np.allclose(got, want, rtol=0.0, atol=1e-9)


def test_identical_keys_give_uniform_weights(rng):
    attn = MultiHeadAttention(8, 2, ParamFactory(5))
    q = Tensor(rng.normal(size=(3, 8)))
    k = Tensor(np.tile(rng.normal(size=(1, 8)), (4, 1)))
    v = rng.normal(size=(4, 8))
    with T.no_grad():
        out = attn(q, k, Tensor(v)).data
    assert np.allclose(attn.last_weights, 0.25)
    mean_value = (v @ attn.v_proj.weight.data + attn.v_proj.bias.data).mean(axis=0)
    want = mean_value @ attn.out_proj.weight.data + attn.out_proj.bias.data
    assert np.allclose(out, np.tile(want, (3, 1)))


def test_encoder_without_layers_passes_memory_through(rng):
    model = DetectionTransformer(make_config(enc_layers=0).model, seed=1)
    assert model.encoder == []
    z = Tensor(rng.normal(size=(16, 16)))
    pos = Tensor(rng.normal(size=(16, 16)))
    assert np.array_equal(model.encoder_forward(z, pos).data, z.data)


def test_zeroed_heads_predict_uniform_classes(model, tiny_config):
    for _, param in model.heads[0].named_parameters():
        param.data = np.zeros_like(param.data)
    n, dim = tiny_config.model.num_queries, tiny_config.model.hidden_dim
    classes = tiny_config.model.num_classes
    refs = np.tile([0.3, 0.6, 0.2, 0.4], (n, 1))
    with T.no_grad():
        ref_logits = T.inverse_sigmoid(Tensor(refs))
        out = model.heads_forward(0, Tensor(np.ones((n, dim))), ref_logits)
    assert np.allclose(out.class_probs.data, 1.0 / (classes + 1))
    assert np.allclose(out.boxes.data, refs)
