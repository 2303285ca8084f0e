"""Comparison methods: prefix tuning, block expansion, sequential LoRA,
and naive full fine-tuning, each adapted to the staged continual setting.

All four expose the same protocol the trainer drives: ``begin_stage``,
``loss``, ``predict``, ``features``, ``trainable_parameters``,
``all_parameters``, ``param_counts``. Unlike the multi-stream model,
these share one feature path across domains, which is exactly why they
can forget.
"""

import numpy as np

from . import tensor as T
from .adapters import LoraAdapter
from .rng import Rng, mix_seed

DEFAULT_PREFIX_LEN = 8


def _bucket(params):
    t = sum(p.data.size for p in params if not p.frozen)
    f = sum(p.data.size for p in params if p.frozen)
    return {"trainable": t, "frozen": f, "total": t + f}


class _StagedModel:
    """Shared head handling and accounting for the baselines."""

    root = "method"

    def __init__(self, backbone):
        self.backbone = backbone
        self.heads = []

    def _add_head(self, num_classes, rng):
        j = len(self.heads)
        d = self.backbone.config.embed_dim
        w = T.Parameter(
            rng.normals((d, num_classes), 0.02), "%s.domain%d.head.w" % (self.root, j)
        )
        b = T.Parameter(np.zeros(num_classes), "%s.domain%d.head.b" % (self.root, j))
        self.heads.append((w, b))

    def head_logits(self, feats, domain_id):
        w, b = self.heads[domain_id]
        return T.matmul(feats, w) + b

    def loss(self, images, labels):
        j = len(self.heads) - 1
        feats = self._train_feature_tokens(images)
        return T.cross_entropy(self.head_logits(feats, j), labels)

    def predict(self, images):
        """Newest-domain label predictions (training-time validation)."""
        j = len(self.heads) - 1
        with T.no_grad():
            feats = self._train_feature_tokens(images)
            return np.argmax(self.head_logits(feats, j).data, axis=1)

    def _domain_parameter_groups(self):
        raise NotImplementedError

    def _train_feature_tokens(self, images):
        raise NotImplementedError

    def trainable_parameters(self):
        return [p for p in self._parameter_list() if not p.frozen]

    def _parameter_list(self):
        out = list(self.backbone.parameters())
        for group in self._domain_parameter_groups():
            out.extend(group)
        return out

    def all_parameters(self):
        return {p.name: p for p in self._parameter_list()}

    def param_counts(self):
        report = {"backbone": _bucket(self.backbone.parameters()), "domains": []}
        for j, group in enumerate(self._domain_parameter_groups()):
            entry = _bucket(group)
            entry["domain"] = j
            report["domains"].append(entry)
        report["model"] = _bucket(self._parameter_list())
        return report

    def _freeze_previous(self):
        for group in self._domain_parameter_groups():
            for p in group:
                p.frozen = True


class PrefixModel(_StagedModel):
    """Per-domain learned rows prepended to the input token sequence."""

    root = "prefix"

    def __init__(self, backbone, prefix_len=DEFAULT_PREFIX_LEN):
        super().__init__(backbone)
        if prefix_len < 0:
            raise ValueError("prefix_len must be >= 0")
        self.prefix_len = prefix_len
        self.prefixes = []

    def begin_stage(self, num_classes, seed=0):
        self.backbone.freeze()
        self._freeze_previous()
        j = len(self.prefixes)
        rng = Rng(mix_seed(seed, 31, j))
        d = self.backbone.config.embed_dim
        self.prefixes.append(
            T.Parameter(
                rng.normals((self.prefix_len, d), 0.02), "prefix.domain%d.p" % j
            )
        )
        self._add_head(num_classes, rng)

    def _domain_parameter_groups(self):
        for j, p in enumerate(self.prefixes):
            w, b = self.heads[j]
            yield [p, w, b]

    def feature_tokens(self, images, domain_id=None):
        """Class token after the blocks; with a domain's prefix if given."""
        x = self.backbone.patch_embed(images)
        cls_index = 0
        if domain_id is not None:
            m = self.prefix_len
            if not 0 <= domain_id < len(self.prefixes):
                raise KeyError("domain %r has no prefix" % domain_id)
            if m:
                b = x.shape[0]
                d = self.backbone.config.embed_dim
                rows = T.add(T.Tensor(np.zeros((b, m, d))), self.prefixes[domain_id])
                x = T.concat([rows, x], axis=1)
                cls_index = m
        for w in self.backbone.blocks:
            x = self.backbone.block_forward(x, w)
        return x[:, cls_index, :]

    def _train_feature_tokens(self, images):
        return self.feature_tokens(images, len(self.prefixes) - 1)

    def features(self, images, domain_id=None):
        """domain_id None = the bare backbone path (no prefix learned yet)."""
        with T.no_grad():
            return self.feature_tokens(images, domain_id).data


class ExpandedModel(_StagedModel):
    """Appends one identity-initialized block per domain."""

    root = "expand"

    def __init__(self, backbone):
        super().__init__(backbone)
        self.extra_blocks = []

    def expand_for_domain(self, num_classes, seed=0):
        """Copy the topmost block, zero its residual-branch outputs.

        With W_o = 0 and the second MLP weight = 0 both residual branches
        contribute exactly zero, so the expanded model computes the same
        function it did before this call.
        """
        self.backbone.freeze()
        self._freeze_previous()
        j = len(self.extra_blocks)
        top = self.extra_blocks[-1] if self.extra_blocks else self.backbone.blocks[-1]
        blk = top.copy_renamed("expand.domain%d.block" % j)
        blk.wo.assign(np.zeros_like(blk.wo.data))
        blk.mlp_w2.assign(np.zeros_like(blk.mlp_w2.data))
        self.extra_blocks.append(blk)
        self._add_head(num_classes, Rng(mix_seed(seed, 32, j)))

    begin_stage = expand_for_domain

    def _domain_parameter_groups(self):
        for j, blk in enumerate(self.extra_blocks):
            w, b = self.heads[j]
            yield blk.parameters() + [w, b]

    def feature_tokens(self, images):
        x = self.backbone.patch_embed(images)
        for w in self.backbone.blocks:
            x = self.backbone.block_forward(x, w)
        for w in self.extra_blocks:
            x = self.backbone.block_forward(x, w)
        return x[:, 0, :]

    _train_feature_tokens = feature_tokens

    def features(self, images, domain_id=None):
        with T.no_grad():
            return self.feature_tokens(images).data


class SeqLoraModel(_StagedModel):
    """All domains' low-rank updates applied simultaneously to Q/K/V."""

    root = "seqlora"

    def __init__(self, backbone, rank=16, alpha=None):
        super().__init__(backbone)
        self.rank = rank
        self.alpha = float(alpha) if alpha is not None else float(rank)
        self.updates = []

    def begin_stage(self, num_classes, seed=0):
        self.backbone.freeze()
        self._freeze_previous()
        j = len(self.updates)
        rng = Rng(mix_seed(seed, 33, j))
        d = self.backbone.config.embed_dim
        blocks = []
        for b in range(self.backbone.config.depth):
            prefix = "seqlora.domain%d.block%d" % (j, b)
            blocks.append(
                {
                    kind: LoraAdapter(d, self.rank, self.alpha,
                                      "%s.%s" % (prefix, kind), rng)
                    for kind in ("q", "k", "v")
                }
            )
        self.updates.append(blocks)
        self._add_head(num_classes, rng)

    def _domain_parameter_groups(self):
        for j, blocks in enumerate(self.updates):
            group = []
            for blk in blocks:
                for kind in ("q", "k", "v"):
                    group.extend(blk[kind].parameters())
            w, b = self.heads[j]
            yield group + [w, b]

    def _proj(self, x, block_id, kind):
        w0 = getattr(self.backbone.blocks[block_id], "w" + kind)
        acc = T.matmul(x, w0)
        # fixed ascending-domain accumulation keeps results reproducible
        for blocks in self.updates:
            ad = blocks[block_id][kind]
            acc = acc + T.matmul(T.matmul(x, ad.A), ad.B) * (ad.alpha / ad.rank)
        return acc

    def feature_tokens(self, images):
        x = self.backbone.patch_embed(images)
        for b, w in enumerate(self.backbone.blocks):
            a = T.layer_norm(x, w.ln1_g, w.ln1_b)
            att = self.backbone.attention(
                self._proj(a, b, "q"), self._proj(a, b, "k"), self._proj(a, b, "v"),
                w.wo,
            )
            x = x + att
            x = x + self.backbone.mlp(T.layer_norm(x, w.ln2_g, w.ln2_b), w)
        return x[:, 0, :]

    _train_feature_tokens = feature_tokens

    def features(self, images, domain_id=None):
        with T.no_grad():
            return self.feature_tokens(images).data


class FullFTModel(_StagedModel):
    """Every backbone weight stays trainable at every stage."""

    root = "fullft"

    def __init__(self, backbone):
        net = backbone.copy()
        for p in net.parameters():
            p.frozen = False
        super().__init__(net)

    def begin_stage(self, num_classes, seed=0):
        j = len(self.heads)
        for w, b in self.heads:
            w.frozen = True
            b.frozen = True
        self._add_head(num_classes, Rng(mix_seed(seed, 34, j)))

    def _domain_parameter_groups(self):
        for w, b in self.heads:
            yield [w, b]

    def _train_feature_tokens(self, images):
        return self.backbone.feature_tokens(images)

    def features(self, images, domain_id=None):
        with T.no_grad():
            return self.backbone.feature_tokens(images).data


def full_finetune_step(model, images, labels, lr):
    """One supervised SGD step over every trainable parameter."""
    loss = model.loss(images, labels)
    T.backward(loss)
    for p in model.trainable_parameters():
        p.data = p.data - lr * p.grad
        p.grad = None
    return float(loss.data)
