import numpy as np
import pytest

from cladapt import tensor as T
from cladapt.backbone import Backbone, BackboneConfig
from cladapt.baselines import (
    ExpandedModel,
    FullFTModel,
    PrefixModel,
    SeqLoraModel,
    full_finetune_step,
)


def _cfg():
    return BackboneConfig(embed_dim=4, depth=2, num_heads=2, image_size=4,
                          patch_size=2)


def _net(seed=0):
    net = Backbone(_cfg(), seed=seed)
    net.freeze()
    return net


def _images(n=3):
    return np.random.default_rng(8).uniform(size=(n, 1, 4, 4))


# prefix tuning --------------------------------------------------------------


def test_prefix_bare_path_is_the_backbone():
    net = _net()
    model = PrefixModel(net, prefix_len=4)
    model.begin_stage(3, seed=0)
    imgs = _images()
    assert np.array_equal(model.features(imgs), net.features(imgs))


def test_prefix_path_differs_from_bare():
    net = _net()
    model = PrefixModel(net, prefix_len=4)
    model.begin_stage(3, seed=0)
    imgs = _images()
    assert not np.allclose(model.features(imgs, 0), model.features(imgs),
                           atol=1e-9)


def test_zero_length_prefix_is_exact_identity():
    net = _net()
    model = PrefixModel(net, prefix_len=0)
    model.begin_stage(3, seed=0)
    imgs = _images()
    assert np.array_equal(model.features(imgs, 0), net.features(imgs))


def test_prefix_rejects_negative_length_and_unknown_domain():
    with pytest.raises(ValueError):
        PrefixModel(_net(), prefix_len=-1)
    model = PrefixModel(_net(), prefix_len=2)
    model.begin_stage(3, seed=0)
    with pytest.raises(KeyError):
        model.features(_images(1), domain_id=1)


def test_prefix_param_names_and_freezing():
    model = PrefixModel(_net(), prefix_len=2)
    model.begin_stage(3, seed=0)
    names = set(model.all_parameters())
    assert "prefix.domain0.p" in names
    assert "prefix.domain0.head.w" in names
    first_prefix = model.prefixes[0]
    assert not first_prefix.frozen
    model.begin_stage(4, seed=1)
    assert first_prefix.frozen
    trainable = {p.name for p in model.trainable_parameters()}
    assert trainable == {"prefix.domain1.p", "prefix.domain1.head.w",
                         "prefix.domain1.head.b"}


def test_prefix_training_path_uses_newest_prefix():
    model = PrefixModel(_net(), prefix_len=2)
    model.begin_stage(3, seed=0)
    imgs = _images(2)
    with T.no_grad():
        direct = model.feature_tokens(imgs, 0).data
        train = model._train_feature_tokens(imgs).data
    assert np.array_equal(direct, train)


# block expansion ------------------------------------------------------------


def test_expansion_is_exact_identity_at_creation():
    net = _net()
    model = ExpandedModel(net)
    imgs = _images()
    before = model.features(imgs)
    model.begin_stage(3, seed=0)
    after = model.features(imgs)
    assert np.array_equal(before, after)
    assert np.array_equal(before, net.features(imgs))


def test_expansion_identity_holds_for_each_new_block():
    net = _net()
    model = ExpandedModel(net)
    imgs = _images()
    model.begin_stage(3, seed=0)
    # simulate training of the first extra block
    rng = np.random.default_rng(1)
    blk = model.extra_blocks[0]
    blk.wo.assign(rng.standard_normal(blk.wo.data.shape) * 0.1)
    trained = model.features(imgs)
    model.begin_stage(4, seed=1)
    assert np.array_equal(model.features(imgs), trained)


def test_expansion_copies_the_topmost_block():
    net = _net()
    model = ExpandedModel(net)
    model.begin_stage(3, seed=0)
    assert np.array_equal(model.extra_blocks[0].wq.data,
                          net.blocks[-1].wq.data)
    rng = np.random.default_rng(2)
    model.extra_blocks[0].wq.assign(rng.standard_normal((4, 4)))
    model.begin_stage(4, seed=1)
    # the second extra block must copy the (modified) first extra block,
    # not the backbone top
    assert np.array_equal(model.extra_blocks[1].wq.data,
                          model.extra_blocks[0].wq.data)
    assert not np.array_equal(model.extra_blocks[1].wq.data,
                              net.blocks[-1].wq.data)


def test_expansion_param_names_and_growth():
    model = ExpandedModel(_net())
    model.begin_stage(3, seed=0)
    names = set(model.all_parameters())
    assert "expand.domain0.block.wq" in names
    assert "expand.domain0.block.mlp_w2" in names
    counts = model.param_counts()
    one_block = sum(p.data.size for p in model.extra_blocks[0].parameters())
    head = 4 * 3 + 3
    assert counts["domains"][0]["total"] == one_block + head
    model.begin_stage(3, seed=1)
    counts2 = model.param_counts()
    assert counts2["model"]["total"] == counts["model"]["total"] + one_block + head


def test_expansion_runs_extra_blocks_after_backbone():
    net = _net()
    model = ExpandedModel(net)
    model.begin_stage(3, seed=0)
    rng = np.random.default_rng(3)
    blk = model.extra_blocks[0]
    blk.wo.assign(rng.standard_normal((4, 4)) * 0.2)
    blk.mlp_w2.assign(rng.standard_normal((16, 4)) * 0.2)
    imgs = _images(2)
    with T.no_grad():
        x = net.patch_embed(imgs)
        for w in net.blocks:
            x = net.block_forward(x, w)
        x = net.block_forward(x, blk)
        expect = x.data[:, 0, :]
    assert np.array_equal(model.features(imgs), expect)


# sequential LoRA ------------------------------------------------------------


def test_seq_lora_zero_b_is_the_backbone():
    net = _net()
    model = SeqLoraModel(net, rank=2)
    model.begin_stage(3, seed=0)
    imgs = _images()
    assert np.array_equal(model.features(imgs), net.features(imgs))
    model.begin_stage(4, seed=1)
    assert np.array_equal(model.features(imgs), net.features(imgs))


def test_seq_lora_accumulates_all_stages_ascending():
    net = _net()
    model = SeqLoraModel(net, rank=2, alpha=4.0)
    model.begin_stage(3, seed=0)
    model.begin_stage(3, seed=1)
    rng = np.random.default_rng(4)
    for stage in model.updates:
        for blk in stage:
            for kind in ("q", "k", "v"):
                blk[kind].B.assign(rng.standard_normal((2, 4)) * 0.3)
    x = rng.standard_normal((2, 3, 4))
    with T.no_grad():
        got = model._proj(T.Tensor(x), 0, "q").data
    expect = x @ net.blocks[0].wq.data
    for stage in model.updates:
        ad = stage[0]["q"]
        expect = expect + (ad.alpha / ad.rank) * (x @ ad.A.data) @ ad.B.data
    assert np.allclose(got, expect, atol=1e-12)


def test_seq_lora_later_stages_disturb_earlier_features():
    # the shared feature path is why this baseline forgets; contrast with
    # the multi-stream model where earlier streams are bitwise invariant
    net = _net()
    model = SeqLoraModel(net, rank=2)
    model.begin_stage(3, seed=0)
    imgs = _images()
    rng = np.random.default_rng(5)
    for blk in model.updates[0]:
        blk["q"].B.assign(rng.standard_normal((2, 4)) * 0.3)
    frozen_view = model.features(imgs)
    model.begin_stage(4, seed=1)
    for blk in model.updates[1]:
        blk["q"].B.assign(rng.standard_normal((2, 4)) * 0.3)
    assert not np.array_equal(model.features(imgs), frozen_view)


def test_seq_lora_freezing_and_determinism():
    net = _net()
    a = SeqLoraModel(net, rank=2)
    a.begin_stage(3, seed=0)
    b = SeqLoraModel(net, rank=2)
    b.begin_stage(3, seed=0)
    assert np.array_equal(a.updates[0][0]["q"].A.data,
                          b.updates[0][0]["q"].A.data)
    a.begin_stage(4, seed=1)
    assert a.updates[0][0]["q"].A.frozen
    assert not a.updates[1][0]["q"].A.frozen


# full fine-tuning -----------------------------------------------------------


def test_full_ft_copy_leaves_original_untouched():
    net = _net()
    model = FullFTModel(net)
    model.begin_stage(3, seed=0)
    imgs = _images()
    assert np.array_equal(model.features(imgs), net.features(imgs))
    model.backbone.blocks[0].wq.data += 1.0
    assert net.frozen
    assert not np.array_equal(model.backbone.blocks[0].wq.data,
                              net.blocks[0].wq.data)


def test_full_ft_everything_trainable_except_old_heads():
    model = FullFTModel(_net())
    model.begin_stage(3, seed=0)
    model.begin_stage(4, seed=1)
    trainable = {p.name for p in model.trainable_parameters()}
    assert "backbone.block0.wq" in trainable
    assert "fullft.domain1.head.w" in trainable
    assert "fullft.domain0.head.w" not in trainable
    w0, b0 = model.heads[0]
    assert w0.frozen and b0.frozen


def test_full_finetune_step_zero_lr_is_noop():
    model = FullFTModel(_net())
    model.begin_stage(3, seed=0)
    imgs = _images(4)
    labels = np.array([0, 1, 2, 0])
    before = {p.name: p.data.copy() for p in model.trainable_parameters()}
    loss = full_finetune_step(model, imgs, labels, lr=0.0)
    assert isinstance(loss, float) and loss > 0.0
    for p in model.trainable_parameters():
        assert np.array_equal(p.data, before[p.name]), p.name


def test_full_finetune_step_moves_backbone_weights():
    model = FullFTModel(_net())
    model.begin_stage(3, seed=0)
    imgs = _images(4)
    labels = np.array([0, 1, 2, 0])
    wq_before = model.backbone.blocks[0].wq.data.copy()
    losses = [full_finetune_step(model, imgs, labels, lr=0.1) for _ in range(5)]
    assert not np.array_equal(model.backbone.blocks[0].wq.data, wq_before)
    assert losses[-1] < losses[0]


# shared protocol ------------------------------------------------------------


def test_every_baseline_predicts_with_newest_head():
    imgs = _images(4)
    for make in (
        lambda: PrefixModel(_net(), prefix_len=2),
        lambda: ExpandedModel(_net()),
        lambda: SeqLoraModel(_net(), rank=2),
        lambda: FullFTModel(_net()),
    ):
        model = make()
        model.begin_stage(3, seed=0)
        model.begin_stage(5, seed=1)
        preds = model.predict(imgs)
        assert preds.shape == (4,)
        assert set(preds.tolist()) <= set(range(5))
        loss = model.loss(imgs, np.array([0, 4, 2, 1]))
        assert loss.data.shape == ()
        T.backward(loss)
        for p in model.trainable_parameters():
            assert p.grad is not None, p.name
            p.zero_grad()
