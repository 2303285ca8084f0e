"""Patch-embedding transformer backbone used as the frozen feature extractor.

Two presets are provided: ``tiny`` (width 32, 4 blocks, 4 heads) and ``base``
(width 64, 8 blocks, 8 heads). Blocks are pre-norm: attention and MLP each
read a normalized copy of the stream and add their result back onto it.
The class token of the last block is the feature every downstream component
consumes.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import generate_domain
from .rng import Rng, mix_seed

PRESETS = {
    "tiny": dict(embed_dim=32, depth=4, num_heads=4),
    "base": dict(embed_dim=64, depth=8, num_heads=8),
}


@dataclass
class BackboneConfig:
    embed_dim: int
    depth: int
    num_heads: int
    image_size: int = 16
    patch_size: int = 8
    channels: int = 1
    mlp_ratio: int = 4
    size_tag: str = "custom"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                "image_size %d not divisible by patch_size %d"
                % (self.image_size, self.patch_size)
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(
                "embed_dim %d not divisible by num_heads %d"
                % (self.embed_dim, self.num_heads)
            )

    @property
    def n_patches(self):
        side = self.image_size // self.patch_size
        return side * side

    @property
    def n_tokens(self):
        return self.n_patches + 1

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads


def preset_config(size_tag):
    if size_tag not in PRESETS:
        raise ValueError("unknown size %r (have %s)" % (size_tag, sorted(PRESETS)))
    return BackboneConfig(size_tag=size_tag, **PRESETS[size_tag])


class BlockWeights:
    """Parameters of one transformer block, named under ``prefix``."""

    FIELDS = ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
              "mlp_w1", "mlp_w2")

    def __init__(self, config, prefix, rng):
        d = config.embed_dim
        m = config.mlp_ratio * d
        scale = 1.0 / math.sqrt(d)
        self.wq = T.Parameter(rng.normals((d, d), scale), prefix + ".wq")
        self.wk = T.Parameter(rng.normals((d, d), scale), prefix + ".wk")
        self.wv = T.Parameter(rng.normals((d, d), scale), prefix + ".wv")
        self.wo = T.Parameter(rng.normals((d, d), scale), prefix + ".wo")
        self.ln1_g = T.Parameter(np.ones(d), prefix + ".ln1_g")
        self.ln1_b = T.Parameter(np.zeros(d), prefix + ".ln1_b")
        self.ln2_g = T.Parameter(np.ones(d), prefix + ".ln2_g")
        self.ln2_b = T.Parameter(np.zeros(d), prefix + ".ln2_b")
        self.mlp_w1 = T.Parameter(rng.normals((d, m), scale), prefix + ".mlp_w1")
        self.mlp_w2 = T.Parameter(
            rng.normals((m, d), 1.0 / math.sqrt(m)), prefix + ".mlp_w2"
        )

    def parameters(self):
        return [getattr(self, f) for f in self.FIELDS]

    def copy_renamed(self, prefix):
        """Deep copy with fresh names; used by block expansion."""
        dup = object.__new__(BlockWeights)
        for f in self.FIELDS:
            setattr(dup, f, T.Parameter(getattr(self, f).data.copy(), prefix + "." + f))
        return dup


class Backbone:
    """Frozen-after-pretraining feature extractor."""

    def __init__(self, config, seed=0):
        self.config = config
        d = config.embed_dim
        pdim = config.channels * config.patch_size * config.patch_size
        rng = Rng(mix_seed(seed, 11))
        self.patch_w = T.Parameter(
            rng.normals((pdim, d), 1.0 / math.sqrt(pdim)), "backbone.patch.w"
        )
        self.cls = T.Parameter(rng.normals((1, d), 0.02), "backbone.cls")
        self.pos = T.Parameter(rng.normals((config.n_tokens, d), 0.02), "backbone.pos")
        self.blocks = [
            BlockWeights(config, "backbone.block%d" % b, rng)
            for b in range(config.depth)
        ]

    # parameter plumbing ---------------------------------------------------

    def parameters(self):
        out = [self.patch_w, self.cls, self.pos]
        for blk in self.blocks:
            out.extend(blk.parameters())
        return out

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def freeze(self):
        for p in self.parameters():
            p.frozen = True

    @property
    def frozen(self):
        return all(p.frozen for p in self.parameters())

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def copy(self):
        """Independent clone with the same weights and frozen flags."""
        dup = Backbone(self.config, seed=0)
        for dst, src in zip(dup.parameters(), self.parameters()):
            dst.data = src.data.copy()
            dst.frozen = src.frozen
        return dup

    # forward pieces -------------------------------------------------------

    def patch_embed(self, images):
        """(B, C, H, W) array -> (B, n_tokens, d) token Tensor."""
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        b, c, h, w = images.shape
        if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise T.ShapeError(
                "expected images (%d, %d, %d), got (%d, %d, %d)"
                % (cfg.channels, cfg.image_size, cfg.image_size, c, h, w)
            )
        p = cfg.patch_size
        grid = h // p
        flat = (
            images.reshape(b, c, grid, p, grid, p)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(b, grid * grid, c * p * p)
        )
        patches = T.matmul(T.Tensor(flat), self.patch_w)
        cls_rows = T.add(T.Tensor(np.zeros((b, 1, cfg.embed_dim))), self.cls)
        return T.concat([cls_rows, patches], axis=1) + self.pos

    def attention(self, q, k, v, wo):
        """softmax(QK^T / sqrt(d_k)) V per head, then the output projection."""
        cfg = self.config
        b, t, d = q.shape
        nh, dk = cfg.num_heads, cfg.head_dim

        def heads(x):
            return x.reshape(b, t, nh, dk).transpose(0, 2, 1, 3).reshape(b * nh, t, dk)

        qh, kh, vh = heads(q), heads(k), heads(v)
        scores = T.matmul(qh, kh.transpose()) * (1.0 / math.sqrt(dk))
        probs = T.softmax(scores, axis=-1)
        ctx = T.matmul(probs, vh)
        merged = ctx.reshape(b, nh, t, dk).transpose(0, 2, 1, 3).reshape(b, t, d)
        return T.matmul(merged, wo)

    def base_attention(self, x, w):
        q = T.matmul(x, w.wq)
        k = T.matmul(x, w.wk)
        v = T.matmul(x, w.wv)
        return self.attention(q, k, v, w.wo)

    def mlp(self, x, w):
        return T.matmul(T.gelu(T.matmul(x, w.mlp_w1)), w.mlp_w2)

    def block_forward(self, x, w):
        x = x + self.base_attention(T.layer_norm(x, w.ln1_g, w.ln1_b), w)
        return x + self.mlp(T.layer_norm(x, w.ln2_g, w.ln2_b), w)

    def feature_tokens(self, images):
        """Class-token features as a Tensor (grad-capable path)."""
        x = self.patch_embed(images)
        for w in self.blocks:
            x = self.block_forward(x, w)
        return x[:, 0, :]

    def features(self, images, domain_id=None):
        """Class-token features as a plain array; ``domain_id`` is ignored
        (the bare backbone has no domain streams)."""
        with T.no_grad():
            return self.feature_tokens(images).data

    def attention_probs(self, images, block_id=0):
        """Post-softmax attention weights of one block, for inspection."""
        cfg = self.config
        with T.no_grad():
            x = self.patch_embed(images)
            for w in self.blocks[:block_id]:
                x = self.block_forward(x, w)
            w = self.blocks[block_id]
            a = T.layer_norm(x, w.ln1_g, w.ln1_b)
            b, t, d = a.shape
            nh, dk = cfg.num_heads, cfg.head_dim

            def heads(x2):
                return (
                    x2.reshape(b, t, nh, dk).transpose(0, 2, 1, 3).reshape(b * nh, t, dk)
                )

            qh = heads(T.matmul(a, w.wq))
            kh = heads(T.matmul(a, w.wk))
            scores = T.matmul(qh, kh.transpose()) * (1.0 / math.sqrt(dk))
            return T.softmax(scores, axis=-1).data.reshape(b, nh, t, t)


# ---------------------------------------------------------------------------
# surrogate pretraining

_PRETRAIN_EPOCHS = 10
_PRETRAIN_BATCH = 16
_PRETRAIN_LR0 = 0.01
_PRETRAIN_LR_MIN = 0.001


def pretrain_surrogate(config, spec, seed=0):
    """Supervised warm-up on a synthetic generic domain, then freeze.

    Stand-in for large-scale self-supervised pretraining: all we need
    downstream is a deterministic frozen extractor whose features carry
    class structure.
    """
    train, _val = generate_domain(spec, "pretrain")
    net = Backbone(config, seed=seed)
    d = config.embed_dim
    head_rng = Rng(mix_seed(seed, 12))
    head_w = T.Parameter(head_rng.normals((d, train.num_classes), 0.02), "pretrain.head.w")
    head_b = T.Parameter(np.zeros(train.num_classes), "pretrain.head.b")
    params = net.parameters() + [head_w, head_b]

    n = len(train)
    for epoch in range(_PRETRAIN_EPOCHS):
        span = 0.5 * (1.0 + math.cos(math.pi * epoch / _PRETRAIN_EPOCHS))
        lr = _PRETRAIN_LR0 * span + _PRETRAIN_LR_MIN * (1.0 - span)
        order = list(range(n))
        Rng(mix_seed(seed, 13, epoch)).shuffle(order)
        for start in range(0, n, _PRETRAIN_BATCH):
            idx = order[start : start + _PRETRAIN_BATCH]
            feats = net.feature_tokens(train.images[idx])
            logits = T.matmul(feats, head_w) + head_b
            loss = T.cross_entropy(logits, train.labels[idx])
            T.backward(loss)
            for p in params:
                p.data = p.data - lr * p.grad
                p.grad = None
    net.freeze()
    return net


_CACHE = {}


def get_backbone(size_tag, seed, spec):
    """Pretrained frozen backbone, cached per (size, seed, data spec).

    The returned object is shared: callers that intend to mutate it (full
    fine-tuning) must copy it first.
    """
    key = (size_tag, seed, spec.kind, spec.num_classes, spec.samples_per_class,
           spec.image_size, spec.noise, spec.seed)
    if key not in _CACHE:
        _CACHE[key] = pretrain_surrogate(preset_config(size_tag), spec, seed)
    return _CACHE[key]
