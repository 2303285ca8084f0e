import json
import os

import numpy as np
import pytest

from cladapt import tensor as T
from cladapt.adapters import ContinualModel
from cladapt.backbone import Backbone, BackboneConfig
from cladapt.baselines import ExpandedModel, FullFTModel, PrefixModel, SeqLoraModel
from cladapt.checkpoint import load as load_checkpoint
from cladapt.data import SyntheticDomainSpec, generate_domain
from cladapt.rng import Rng, mix_seed
from cladapt.tensor import Parameter
from cladapt.training import (
    METHODS,
    MissingGradientError,
    RunResult,
    SequenceSpec,
    TrainConfig,
    build_method,
    cosine_lr,
    run_sequence,
    sgd_step,
    train_domain,
    write_metrics_json,
)


def _cfg(**kw):
    return TrainConfig(**kw)


# schedule -------------------------------------------------------------------


def test_cosine_endpoints_exact():
    cfg = _cfg()
    assert cosine_lr(0, 10, cfg) == 0.01
    assert cosine_lr(10, 10, cfg) == 0.001


def test_cosine_midpoint():
    cfg = _cfg()
    assert abs(cosine_lr(5, 10, cfg) - 0.0055) < 1e-15


def test_cosine_monotone_nonincreasing():
    cfg = _cfg()
    vals = [cosine_lr(e, 20, cfg) for e in range(21)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_cosine_rejects_out_of_range_epoch():
    cfg = _cfg()
    with pytest.raises(ValueError):
        cosine_lr(-1, 10, cfg)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        _cfg(lr0=0.001, lr_min=0.01).validate()
    with pytest.raises(ValueError):
        _cfg(lr_min=0.0).validate()
    with pytest.raises(ValueError):
        _cfg(epochs=0).validate()
    with pytest.raises(ValueError):
        _cfg(batch_size=0).validate()
    _cfg().validate()


def test_sequence_spec():
    s = SequenceSpec(["a", "b", "c"])
    assert list(s) == ["a", "b", "c"]
    assert len(s) == 3
    with pytest.raises(ValueError):
        SequenceSpec([])
    with pytest.raises(ValueError):
        SequenceSpec(["a", "a"])


# optimizer ------------------------------------------------------------------


def test_sgd_step_arithmetic():
    p = Parameter(np.array([1.0]), "p")
    p.grad = np.array([2.0])
    sgd_step([p], lr=0.1)
    assert np.allclose(p.data, [0.8])
    assert p.grad is None


def test_sgd_weight_decay():
    p = Parameter(np.array([2.0]), "p")
    p.grad = np.array([0.0])
    sgd_step([p], lr=0.1, weight_decay=0.5)
    # g' = 0 + 0.5 * 2 = 1, so p <- 2 - 0.1
    assert np.allclose(p.data, [1.9])


def test_sgd_skips_frozen():
    p = Parameter(np.array([1.0]), "p", frozen=True)
    q = Parameter(np.array([1.0]), "q")
    q.grad = np.array([1.0])
    sgd_step([p, q], lr=0.5)
    assert p.data[0] == 1.0
    assert q.data[0] == 0.5


def test_sgd_missing_grad_names_parameter():
    p = Parameter(np.array([1.0]), "layer.weird")
    with pytest.raises(MissingGradientError) as exc:
        sgd_step([p], lr=0.1)
    assert "layer.weird" in str(exc.value)


# train_domain ---------------------------------------------------------------


class _ScriptedModel:
    """Fixed gradient per step; validation accuracy follows a script."""

    def __init__(self, val_accs, n_val):
        self.p = Parameter(np.array([0.0]), "scripted.p")
        self.val_accs = list(val_accs)
        self.n_val = n_val
        self.epoch = 0

    def trainable_parameters(self):
        return [self.p]

    def loss(self, images, labels):
        return self.p.sum() * 1.0

    def predict(self, images):
        acc = self.val_accs[self.epoch]
        self.epoch += 1
        n_right = int(round(acc * self.n_val))
        out = np.zeros(self.n_val, dtype=np.int64)
        out[n_right:] = 1
        return out


def _scripted_datasets(n_train=8, n_val=10):
    images = np.zeros((n_train, 1, 4, 4))
    labels = np.zeros(n_train, dtype=np.int64)
    val_images = np.zeros((n_val, 1, 4, 4))
    val_labels = np.zeros(n_val, dtype=np.int64)
    from cladapt.data import DomainDataset

    train = DomainDataset("s", "train", images, labels, 2)
    val = DomainDataset("s", "val", val_images, val_labels, 2)
    return train, val


def test_train_domain_restores_best_epoch_with_earliest_tie():
    train, val = _scripted_datasets()
    model = _ScriptedModel([0.5, 0.8, 0.8, 0.6], n_val=10)
    cfg = _cfg(epochs=4, batch_size=4)
    trace = train_domain(model, train, val, cfg, stage_seed=0)
    accs = [row[3] for row in trace]
    assert accs == [0.5, 0.8, 0.8, 0.6]
    # dloss/dp = 1 every step, two batches per epoch; after epoch e the
    # weight is -sum of 2*lr over epochs 0..e; best val acc first happens
    # at epoch 1, so that snapshot must be restored
    expect = -sum(2.0 * cosine_lr(e, 4, cfg) for e in (0, 1))
    assert abs(model.p.data[0] - expect) < 1e-15


def test_train_domain_trace_shapes_and_lr_column():
    train, val = _scripted_datasets()
    model = _ScriptedModel([0.1, 0.2, 0.3], n_val=10)
    cfg = _cfg(epochs=3, batch_size=8)
    trace = train_domain(model, train, val, cfg, stage_seed=5)
    assert len(trace) == 3
    for e, row in enumerate(trace):
        assert row[0] == e
        assert row[1] == cosine_lr(e, 3, cfg)


def test_train_domain_rejects_empty_dataset():
    train, val = _scripted_datasets(n_train=0)
    model = _ScriptedModel([0.5], n_val=10)
    with pytest.raises(ValueError):
        train_domain(model, train, val, _cfg(epochs=1), stage_seed=0)


def _small_backbone(seed=0):
    net = Backbone(
        BackboneConfig(embed_dim=8, depth=2, num_heads=2, image_size=8,
                       patch_size=4),
        seed=seed,
    )
    net.freeze()
    return net


def _domain(kind, classes, seed, spc=10, size=8, **kw):
    spec = SyntheticDomainSpec(kind=kind, num_classes=classes,
                               samples_per_class=spc, image_size=size,
                               seed=seed)
    return generate_domain(spec)


def test_train_domain_deterministic_per_seed():
    train, val = _domain("generic", 3, seed=0)

    def run(stage_seed):
        model = ContinualModel(_small_backbone(), rank=2)
        model.begin_stage(3, seed=0)
        trace = train_domain(model, train, val, _cfg(epochs=2), stage_seed)
        weights = {p.name: p.data.copy() for p in model.trainable_parameters()}
        return trace, weights

    t1, w1 = run(7)
    t2, w2 = run(7)
    t3, _ = run(8)
    assert t1 == t2
    for name in w1:
        assert np.array_equal(w1[name], w2[name])
    assert t1 != t3


def test_full_ft_learns_separable_toy():
    from cladapt.backbone import preset_config

    train, val = _domain("generic", 3, seed=1, size=16)
    net = Backbone(preset_config("tiny"), seed=1)
    net.freeze()
    model = FullFTModel(net)
    model.begin_stage(3, seed=0)
    cfg = _cfg(epochs=20, lr0=0.02, lr_min=0.002, batch_size=8)
    trace = train_domain(model, train, val, cfg, stage_seed=3)
    assert max(row[3] for row in trace) >= 0.9
    assert trace[-1][2] < 0.5


def test_augmentation_changes_training_but_stays_deterministic():
    train, val = _domain("generic", 3, seed=2)

    def run(augment):
        model = ContinualModel(_small_backbone(2), rank=2)
        model.begin_stage(3, seed=0)
        return train_domain(model, train, val,
                            _cfg(epochs=1, augment=augment), stage_seed=0)

    plain1 = run(False)
    plain2 = run(False)
    augged1 = run(True)
    augged2 = run(True)
    assert plain1 == plain2
    assert augged1 == augged2
    assert plain1 != augged1


# method factory -------------------------------------------------------------


def test_build_method_types():
    net = _small_backbone()
    assert isinstance(build_method("ours", net), ContinualModel)
    assert build_method("ours", net).gating is True
    assert build_method("ours_no_gate", net).gating is False
    assert isinstance(build_method("prefix", net, prefix_len=3), PrefixModel)
    assert isinstance(build_method("block_expand", net), ExpandedModel)
    assert isinstance(build_method("seq_lora", net, rank=8), SeqLoraModel)
    assert isinstance(build_method("full_ft", net), FullFTModel)


def test_build_method_unknown_name():
    with pytest.raises(ValueError) as exc:
        build_method("adapterfusion", _small_backbone())
    for m in METHODS:
        assert m in str(exc.value)


def test_methods_tuple_is_pinned():
    assert METHODS == ("ours", "ours_no_gate", "prefix", "block_expand",
                       "seq_lora", "full_ft")


# run_sequence ---------------------------------------------------------------


def _two_domain_setup():
    datasets = {
        "generic": _domain("generic", 3, seed=0),
        "texture": _domain("texture", 4, seed=1),
    }
    return datasets


def test_run_sequence_fills_matrix_and_zero_bwt_for_ours():
    datasets = _two_domain_setup()
    result = run_sequence("ours", ["generic", "texture"], datasets,
                          _small_backbone(), _cfg(epochs=1), rank=2, k=3)
    R = result.matrices[3].R
    assert not np.isnan(R).any()
    m = result.metrics[3]
    assert m.bwt == 0.0
    assert R[1, 0] == R[0, 0]
    assert len(result.traces) == 2
    assert result.sequence == ["generic", "texture"]


def test_run_sequence_eval_ks_share_one_training():
    datasets = _two_domain_setup()
    result = run_sequence("ours", ["generic", "texture"], datasets,
                          _small_backbone(), _cfg(epochs=1), rank=2, k=3,
                          eval_ks=(1, 5))
    assert sorted(result.matrices) == [1, 3, 5]
    assert sorted(result.metrics) == [1, 3, 5]
    assert result.primary_k == 3


def test_run_sequence_rejects_unknown_domain_and_bad_config():
    datasets = _two_domain_setup()
    with pytest.raises(ValueError):
        run_sequence("ours", ["generic", "nosuch"], datasets,
                     _small_backbone(), _cfg(epochs=1), rank=2)
    with pytest.raises(ValueError):
        run_sequence("ours", ["generic", "generic"], datasets,
                     _small_backbone(), _cfg(epochs=1), rank=2)
    with pytest.raises(ValueError):
        run_sequence("ours", ["generic"], datasets, _small_backbone(),
                     _cfg(epochs=0), rank=2)


def test_run_sequence_writes_artifacts(tmp_path):
    datasets = _two_domain_setup()
    out = tmp_path / "run"
    result = run_sequence("seq_lora", ["generic", "texture"], datasets,
                          _small_backbone(), _cfg(epochs=2), rank=2, k=3,
                          out_dir=str(out))
    files = sorted(os.listdir(out))
    assert files == ["config.json", "matrix.csv", "metrics.json",
                     "stage0.clck", "stage1.clck", "trace.csv"]

    cfg_payload = json.loads((out / "config.json").read_text())
    assert cfg_payload["method"] == "seq_lora"
    assert cfg_payload["sequence"] == "generic,texture"
    assert cfg_payload["rank"] == 2 and cfg_payload["epochs"] == 2

    trace_lines = (out / "trace.csv").read_text().strip().split("\n")
    assert trace_lines[0] == "stage,epoch,lr,train_loss,val_acc"
    assert len(trace_lines) == 1 + 2 * 2

    matrix_lines = (out / "matrix.csv").read_text().strip().split("\n")
    assert matrix_lines[0] == "stage,eval_domain,accuracy"
    assert len(matrix_lines) == 1 + 4

    payload = json.loads((out / "metrics.json").read_text())
    assert list(payload) == ["method", "sequence", "k", "rank", "acc",
                             "bwt", "fwt"]
    assert payload["acc"] == result.metrics[3].acc

    ck0 = load_checkpoint(out / "stage0.clck")
    ck1 = load_checkpoint(out / "stage1.clck")
    assert any(n.startswith("seqlora.domain0.") for n in ck0)
    assert not any(n.startswith("seqlora.domain1.") for n in ck0)
    assert any(n.startswith("seqlora.domain1.") for n in ck1)
    assert any(n.startswith("backbone.") for n in ck0)


def test_run_sequence_metrics_json_reproducible(tmp_path):
    datasets = _two_domain_setup()
    blobs = []
    for attempt in range(2):
        out = tmp_path / ("run%d" % attempt)
        run_sequence("ours", ["generic", "texture"], datasets,
                     _small_backbone(), _cfg(epochs=1, seed=4), rank=2, k=3,
                     out_dir=str(out))
        blobs.append((out / "metrics.json").read_bytes())
    assert blobs[0] == blobs[1]


def test_write_metrics_json_none_fields(tmp_path):
    from cladapt.evaluation import AccuracyMatrix, CLMetrics

    result = RunResult(
        method="ours",
        sequence=["generic"],
        primary_k=10,
        matrices={10: AccuracyMatrix(["generic"])},
        metrics={10: CLMetrics(acc=0.5, bwt=None, fwt=None)},
    )
    path = tmp_path / "m.json"
    write_metrics_json(str(path), result, rank=16)
    payload = json.loads(path.read_text())
    assert payload["bwt"] is None and payload["fwt"] is None
    assert payload["acc"] == 0.5
