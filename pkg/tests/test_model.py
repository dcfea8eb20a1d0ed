import numpy as np
import pytest

from conftest import randomize, tiny_config
from paraformer import tensor as T
from paraformer.errors import ConfigError, ShapeError, StageError
from paraformer.layers import branch_forward
from paraformer.model import (ModelConfig, branch_features, embed, forward_stage, init_model,
                              predict, stage_logits)


def test_embed_hand_patches():
    cfg = tiny_config(width=4)
    model = init_model(cfg)
    model.embed.patch_proj[...] = np.eye(4)
    model.embed.pos[...] = 0
    img = np.arange(16.0).reshape(4, 4, 1)
    expected = [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]
    np.testing.assert_array_equal(embed(img, model.embed, cfg), expected)


def test_embed_adds_position_rows(tiny_model):
    cfg = tiny_model.config
    img = np.zeros((4, 4, 1))
    np.testing.assert_array_equal(embed(img, tiny_model.embed, cfg), tiny_model.embed.pos)


def test_embed_batch_matches_single(tiny_model, rng):
    imgs = rng.random((3, 4, 4, 1))
    batch = embed(imgs, tiny_model.embed, tiny_model.config)
    for k in range(3):
        np.testing.assert_allclose(batch[k], embed(imgs[k], tiny_model.embed, tiny_model.config),
                                   atol=1e-14)


def test_embed_rejects_wrong_shape(tiny_model):
    with pytest.raises(ConfigError):
        embed(np.zeros((5, 5, 1)), tiny_model.embed, tiny_model.config)


@pytest.mark.parametrize("kw", [dict(patch_size=3), dict(width=0), dict(n_branches=0),
                                dict(dtype="float16")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tiny_config(**kw)


def test_config_dict_round_trip():
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_default_config_dimensions():
    cfg = ModelConfig()
    assert (cfg.tokens, cfg.head_dim, cfg.patch_dim) == (64, 64, 48)


def test_init_is_seeded():
    a, b = init_model(tiny_config()), init_model(tiny_config())
    for (na, va), (nb, vb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert na == nb and va.tobytes() == vb.tobytes()


def test_zero_aggregator_gives_zero_logits(rng):
    model = init_model(tiny_config())
    x0 = embed(rng.random((2, 4, 4, 1)), model.embed, model.config)
    assert not predict(x0, model).any()


def test_stage_one_hand_form(tiny_model, rng):
    x0 = embed(rng.random((4, 4, 1)), tiny_model.embed, tiny_model.config)
    x1 = branch_forward(x0, tiny_model.branches[0])
    expected = x1.mean(axis=0) @ tiny_model.agg.per_branch[0] + tiny_model.agg.bias
    np.testing.assert_allclose(forward_stage(x0, tiny_model, 1), expected, atol=1e-13)


def test_stage_additivity(tiny_model, rng):
    x0 = embed(rng.random((5, 4, 4, 1)), tiny_model.embed, tiny_model.config)
    for i in range(2, 4):
        xi = branch_forward(x0, tiny_model.branches[i - 1])
        delta = xi.mean(axis=1) @ tiny_model.agg.per_branch[i - 1]
        np.testing.assert_allclose(forward_stage(x0, tiny_model, i),
                                   forward_stage(x0, tiny_model, i - 1) + delta, atol=1e-12)


def test_predict_is_last_stage(tiny_model, rng):
    x0 = embed(rng.random((2, 4, 4, 1)), tiny_model.embed, tiny_model.config)
    assert predict(x0, tiny_model).tobytes() == forward_stage(x0, tiny_model, 3).tobytes()


def test_stage_logits_bitwise(tiny_model, rng):
    x0 = embed(rng.random((6, 4, 4, 1)), tiny_model.embed, tiny_model.config)
    for i, logits in enumerate(stage_logits(x0, tiny_model), start=1):
        assert logits.tobytes() == forward_stage(x0, tiny_model, i).tobytes()


def test_stage_out_of_range(tiny_model, rng):
    x0 = embed(rng.random((4, 4, 1)), tiny_model.embed, tiny_model.config)
    for bad in (0, 4):
        with pytest.raises(StageError, match=r"\[1, 3\]"):
            forward_stage(x0, tiny_model, bad)


def test_later_branches_not_evaluated(tiny_model, rng):
    x0 = embed(rng.random((4, 4, 1)), tiny_model.embed, tiny_model.config)
    tiny_model.branch_calls.clear()
    forward_stage(x0, tiny_model, 2)
    assert tiny_model.branch_calls == {1: 1, 2: 1}


def test_branch_independence(tiny_model, rng):
    x0 = embed(rng.random((3, 4, 4, 1)), tiny_model.embed, tiny_model.config)
    before = [branch_features(x0, tiny_model, j).copy() for j in (1, 2)]
    for arr in (tiny_model.branches[2].layers[0].ffn.w_f1, tiny_model.agg.per_branch[2]):
        arr += 1.0
    after = [branch_features(x0, tiny_model, j) for j in (1, 2)]
    for a, b in zip(before, after):
        assert a.tobytes() == b.tobytes()
    assert forward_stage(x0, tiny_model, 2).tobytes() == forward_stage(x0, tiny_model, 2).tobytes()


def test_branch_features_shape(tiny_model, rng):
    x0 = embed(rng.random((2, 4, 4, 1)), tiny_model.embed, tiny_model.config)
    assert branch_features(x0, tiny_model, 3).shape == (2, 4, 8)


def test_parameter_names_are_stable(tiny_model):
    names = list(tiny_model.named_parameters())
    assert names[0] == "embed.patch_proj"
    assert "branches.2.layers.0.attn.heads.1.w_v" in names
    assert names[-1] == "agg.bias"


def test_mismatched_aggregator_rejected(tiny_model):
    from paraformer.model import ParaFormerModel
    with pytest.raises(ShapeError):
        ParaFormerModel(tiny_model.config, tiny_model.embed, tiny_model.branches[:2],
                        tiny_model.agg)


def test_forward_gradcheck_through_model(rng):
    model = randomize(init_model(tiny_config(n_branches=2)), seed=3)
    imgs = rng.random((2, 4, 4, 1))
    labels = np.array([0, 2])
    names = ["embed.patch_proj", "branches.1.layers.0.attn.heads.0.w_k", "agg.per_branch.0"]
    params = model.named_parameters()

    def fn(*arrays):
        bound = model.bind(dict(zip(names, arrays)))
        return T.cross_entropy(forward_stage(embed(imgs, bound.embed, model.config), bound, 2),
                               labels)

    assert T.gradcheck(fn, [params[n].copy() for n in names]) < 1e-4
