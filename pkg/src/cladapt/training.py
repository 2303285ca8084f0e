"""Stage-by-stage training of a domain sequence and matrix collection.

One run: build a method on a frozen pretrained backbone, then for each
domain in the sequence register it, train with SGD under a cosine
schedule, and fill row ``i`` of the accuracy matrix by KNN-probing every
domain. Everything derives from the run seed through the documented mix
function, so a rerun reproduces the matrix byte for byte.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import augment
from .evaluation import AccuracyMatrix, compute_metrics, extract_features, knn_classify
from .rng import Rng, mix_seed

METHODS = ("ours", "ours_no_gate", "prefix", "block_expand", "seq_lora", "full_ft")


@dataclass
class TrainConfig:
    lr0: float = 0.01
    lr_min: float = 0.001
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    augment: bool = False

    def validate(self):
        if not self.lr0 > self.lr_min > 0:
            raise ValueError("need lr0 > lr_min > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


class SequenceSpec:
    """Ordered domain names, no duplicates."""

    def __init__(self, domains):
        domains = list(domains)
        if not domains:
            raise ValueError("a sequence needs at least one domain")
        if len(set(domains)) != len(domains):
            raise ValueError("duplicate domain in sequence %r" % (domains,))
        self.domains = domains

    def __iter__(self):
        return iter(self.domains)

    def __len__(self):
        return len(self.domains)

    def __repr__(self):
        return "SequenceSpec(%r)" % (self.domains,)


class MissingGradientError(RuntimeError):
    """A trainable parameter reached the optimizer without a gradient."""


def cosine_lr(epoch, total, cfg):
    """Half-cosine decay from lr0 to lr_min; endpoints are exact."""
    if not 0 <= epoch <= total:
        raise ValueError("epoch %d outside [0, %d]" % (epoch, total))
    span = 0.5 * (1.0 + math.cos(math.pi * epoch / total))
    return cfg.lr0 * span + cfg.lr_min * (1.0 - span)


def sgd_step(params, lr, weight_decay=0.0):
    """Plain p <- p - lr * g on every non-frozen parameter."""
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            raise MissingGradientError(
                "parameter %r has no gradient; run backward first" % p.name
            )
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        p.data = p.data - lr * g
        p.grad = None


def train_domain(model, train_ds, val_ds, cfg, stage_seed):
    """Train the newest domain; restore the best-validation epoch.

    Returns trace rows ``(epoch, lr, train_loss, val_acc)``. The kept
    snapshot maximizes head accuracy on the validation split; ties go to
    the earlier epoch.
    """
    n = len(train_ds)
    if n == 0:
        raise ValueError("empty training dataset")
    params = model.trainable_parameters()
    best_acc = -1.0
    best_state = None
    trace = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg)
        order = list(range(n))
        Rng(mix_seed(stage_seed, 41, epoch)).shuffle(order)
        aug_rng = Rng(mix_seed(stage_seed, 42, epoch))
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images = train_ds.images[idx]
            if cfg.augment:
                images = np.stack([augment(im, aug_rng) for im in images])
            loss = model.loss(images, train_ds.labels[idx])
            T.backward(loss)
            sgd_step(params, lr, cfg.weight_decay)
            losses.append(float(loss.data))
        val_acc = float(np.mean(model.predict(val_ds.images) == val_ds.labels))
        trace.append((epoch, lr, float(np.mean(losses)), val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = {p.name: p.data.copy() for p in params}
    for p in params:
        p.data = best_state[p.name].copy()
    return trace


def build_method(name, backbone, rank=16, alpha=None, prefix_len=8):
    """Instantiate one of the six comparable methods."""
    from .adapters import ContinualModel
    from .baselines import ExpandedModel, FullFTModel, PrefixModel, SeqLoraModel

    if name == "ours":
        return ContinualModel(backbone, rank=rank, alpha=alpha, gating=True)
    if name == "ours_no_gate":
        return ContinualModel(backbone, rank=rank, alpha=alpha, gating=False)
    if name == "prefix":
        return PrefixModel(backbone, prefix_len=prefix_len)
    if name == "block_expand":
        return ExpandedModel(backbone)
    if name == "seq_lora":
        return SeqLoraModel(backbone, rank=rank, alpha=alpha)
    if name == "full_ft":
        return FullFTModel(backbone)
    raise ValueError("unknown method %r (have %s)" % (name, ", ".join(METHODS)))


@dataclass
class RunResult:
    method: str
    sequence: list
    primary_k: int
    matrices: dict  # k -> AccuracyMatrix
    metrics: dict  # k -> CLMetrics
    traces: list = field(default_factory=list)
    model: object = None


def run_sequence(method, sequence, datasets, backbone, cfg, *, rank=16, alpha=None,
                 k=10, eval_ks=None, prefix_len=8, out_dir=None):
    """Train a full domain sequence and measure the accuracy matrix.

    ``datasets`` maps domain name -> (train, val). ``eval_ks`` evaluates
    several neighbor counts from one training pass; ``k`` stays the
    reported one. When ``out_dir`` is given the run writes config.json,
    per-stage checkpoints, trace.csv, matrix.csv and metrics.json there.
    """
    if not isinstance(sequence, SequenceSpec):
        sequence = SequenceSpec(sequence)
    cfg.validate()
    for name in sequence:
        if name not in datasets:
            raise ValueError("sequence domain %r has no dataset" % name)
    ks = sorted(set(eval_ks or [k]) | {k})
    names = list(sequence)
    chance = [1.0 / datasets[n][0].num_classes for n in names]
    model = build_method(method, backbone, rank=rank, alpha=alpha, prefix_len=prefix_len)
    matrices = {kk: AccuracyMatrix(names) for kk in ks}
    traces = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for i, name in enumerate(names):
        train_ds, val_ds = datasets[name]
        model.begin_stage(train_ds.num_classes, seed=mix_seed(cfg.seed, 51, i))
        rows = train_domain(model, train_ds, val_ds, cfg, mix_seed(cfg.seed, 52, i))
        traces.extend((i,) + r for r in rows)
        for j, other in enumerate(names):
            tr, va = datasets[other]
            selector = j if j <= i else None
            bank = extract_features(model, tr, selector)
            queries = extract_features(model, va, selector)
            for kk in ks:
                pred = knn_classify(bank, queries.features, kk)
                matrices[kk].set(i, j, float(np.mean(pred == va.labels)))
        if out_dir:
            arrays = {nm: p.data for nm, p in model.all_parameters().items()}
            checkpoint.save(os.path.join(out_dir, "stage%d.clck" % i), arrays)

    metrics = {kk: compute_metrics(matrices[kk].R, chance) for kk in ks}
    result = RunResult(method, names, k, matrices, metrics, traces, model)
    if out_dir:
        _write_artifacts(out_dir, result, cfg, rank)
    return result


def _fmt(x):
    return repr(float(x))


def _write_artifacts(out_dir, result, cfg, rank):
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(
            {
                "method": result.method,
                "sequence": ",".join(result.sequence),
                "k": result.primary_k,
                "rank": rank,
                "epochs": cfg.epochs,
                "batch_size": cfg.batch_size,
                "lr0": cfg.lr0,
                "lr_min": cfg.lr_min,
                "weight_decay": cfg.weight_decay,
                "augment": cfg.augment,
                "seed": cfg.seed,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    with open(os.path.join(out_dir, "trace.csv"), "w") as fh:
        fh.write("stage,epoch,lr,train_loss,val_acc\n")
        for stage, epoch, lr, loss, acc in result.traces:
            fh.write("%d,%d,%s,%s,%s\n" % (stage, epoch, _fmt(lr), _fmt(loss), _fmt(acc)))
    with open(os.path.join(out_dir, "matrix.csv"), "w") as fh:
        fh.write("stage,eval_domain,accuracy\n")
        for stage, domain, acc in result.matrices[result.primary_k].rows():
            fh.write("%d,%s,%s\n" % (stage, domain, _fmt(acc)))
    write_metrics_json(os.path.join(out_dir, "metrics.json"), result, rank)


def write_metrics_json(path, result, rank):
    m = result.metrics[result.primary_k]
    payload = {
        "method": result.method,
        "sequence": ",".join(result.sequence),
        "k": result.primary_k,
        "rank": rank,
        "acc": m.acc,
        "bwt": m.bwt,
        "fwt": m.fwt,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
