"""Gated multi-domain LoRA attention on top of a frozen backbone.

Each registered domain owns low-rank Q/K/V updates per block, one shared
gate matrix per block, and a classification head. Streams are kept
separate end to end: stream ``j`` reads the frozen backbone, its own
adapters, and gated projections of streams ``i < j`` only, so training a
new domain cannot move any earlier stream (that is the retention
guarantee the tests pin down exactly).
"""

import numpy as np

from . import tensor as T
from .rng import Rng, mix_seed

SUPPORTED_RANKS = (8, 16, 32)


class LoraAdapter:
    """Low-rank additive update (alpha/r) A B for one base projection."""

    def __init__(self, d, rank, alpha, prefix, rng):
        if rank < 1:
            raise ValueError("rank must be positive, got %d" % rank)
        self.rank = rank
        self.alpha = float(alpha)
        self.A = T.Parameter(rng.normals((d, rank), 0.02), prefix + ".A")
        self.B = T.Parameter(np.zeros((rank, d)), prefix + ".B")

    def parameters(self):
        return [self.A, self.B]


class GateUnit:
    """Shared d x d gate matrix for one (block, adopting-domain) pair."""

    def __init__(self, d, prefix):
        self.wg = T.Parameter(np.zeros((d, d)), prefix + ".gate.wg")

    def parameters(self):
        return [self.wg]


def lora_project(x, w0, adapter):
    """x W0 + (alpha/r) (x A) B, never materializing the d x d update."""
    base = T.matmul(x, w0)
    low = T.matmul(T.matmul(x, adapter.A), adapter.B)
    return base + low * (adapter.alpha / adapter.rank)


def gate_apply(prev, gate):
    """sigmoid(prev W_g) elementwise-scales the prior-domain projection."""
    return T.sigmoid(T.matmul(prev, gate.wg)) * prev


def merge_outputs(streams):
    """Elementwise mean across domain streams."""
    if not streams:
        raise ValueError("merge_outputs needs at least one stream")
    acc = streams[0]
    for s in streams[1:]:
        acc = acc + s
    return acc * (1.0 / len(streams))


class DomainAdapterSet:
    """All trainables one domain adds: adapters, gates, head."""

    def __init__(self, config, domain_id, num_classes, rank, alpha, seed, gating):
        d = config.embed_dim
        self.domain_id = domain_id
        self.num_classes = num_classes
        self.rank = rank
        self.alpha = float(alpha)
        rng = Rng(mix_seed(seed, 21, domain_id))
        root = "domain%d" % domain_id
        self.adapters = []
        self.gates = []
        for b in range(config.depth):
            prefix = "%s.block%d" % (root, b)
            self.adapters.append(
                {
                    kind: LoraAdapter(d, rank, alpha, "%s.%s" % (prefix, kind), rng)
                    for kind in ("q", "k", "v")
                }
            )
            self.gates.append(GateUnit(d, prefix))
        self.head_w = T.Parameter(rng.normals((d, num_classes), 0.02), root + ".head.w")
        self.head_b = T.Parameter(np.zeros(num_classes), root + ".head.b")
        if not gating or domain_id == 0:
            # inert gate matrices (gating off, or no prior streams to gate)
            # stay out of the optimizer so every trainable parameter is
            # guaranteed a gradient
            for g in self.gates:
                g.wg.frozen = True

    def parameters(self):
        out = []
        for block in self.adapters:
            for kind in ("q", "k", "v"):
                out.extend(block[kind].parameters())
        for g in self.gates:
            out.extend(g.parameters())
        out.extend([self.head_w, self.head_b])
        return out

    def freeze(self):
        for p in self.parameters():
            p.frozen = True

    @property
    def frozen(self):
        return all(p.frozen for p in self.parameters())


def added_param_count(d, depth, rank, num_classes):
    """Closed-form size of one DomainAdapterSet."""
    return depth * (3 * (d * rank + rank * d) + d * d) + d * num_classes + num_classes


class ContinualModel:
    """Frozen backbone plus an ordered list of domain adapter sets."""

    def __init__(self, backbone, rank=16, alpha=None, gating=True):
        self.backbone = backbone
        self.rank = rank
        self.alpha = float(alpha) if alpha is not None else float(rank)
        self.gating = bool(gating)
        self.domains = []

    # registration ---------------------------------------------------------

    def add_domain(self, num_classes, seed=0):
        """Append a domain; freezes the backbone and all prior domains."""
        self.backbone.freeze()
        for dom in self.domains:
            dom.freeze()
        dom = DomainAdapterSet(
            self.backbone.config,
            len(self.domains),
            num_classes,
            self.rank,
            self.alpha,
            seed,
            self.gating,
        )
        self.domains.append(dom)
        return dom

    begin_stage = add_domain

    # forward --------------------------------------------------------------

    def _gate(self, prev, gate):
        if not self.gating:
            return prev
        return gate_apply(prev, gate)

    def _gated_projection(self, normed, block_id, kind):
        """Per-domain Q (or K, V): own projection plus gated prior ones."""
        w0 = getattr(self.backbone.blocks[block_id], "w" + kind)
        projs = [
            lora_project(normed[i], w0, self.domains[i].adapters[block_id][kind])
            for i in range(len(normed))
        ]
        outs = []
        for j in range(len(projs)):
            acc = None
            gate = self.domains[j].gates[block_id]
            for i in range(j):
                term = self._gate(projs[i], gate)
                acc = term if acc is None else acc + term
            outs.append(projs[j] if acc is None else acc + projs[j])
        return outs

    def multi_block_forward(self, streams, block_id):
        """One block applied to every stream; shared frozen MLP per stream."""
        w = self.backbone.blocks[block_id]
        normed = [T.layer_norm(s, w.ln1_g, w.ln1_b) for s in streams]
        qs = self._gated_projection(normed, block_id, "q")
        ks = self._gated_projection(normed, block_id, "k")
        vs = self._gated_projection(normed, block_id, "v")
        outs = []
        for j in range(len(streams)):
            h = streams[j] + self.backbone.attention(qs[j], ks[j], vs[j], w.wo)
            outs.append(
                h + self.backbone.mlp(T.layer_norm(h, w.ln2_g, w.ln2_b), w)
            )
        return outs

    def forward_streams(self, images, upto=None):
        """Token streams after the last block, one per domain.

        ``upto`` limits computation to streams 0..upto; a stream never
        reads later domains' parameters, so truncation changes nothing.
        """
        if not self.domains:
            raise RuntimeError("no domains registered")
        n = len(self.domains) if upto is None else upto + 1
        x = self.backbone.patch_embed(images)
        streams = [x] * n
        for b in range(self.backbone.config.depth):
            streams = self.multi_block_forward(streams, b)
        return streams

    def stream_feature_tokens(self, images, domain_id):
        if not 0 <= domain_id < len(self.domains):
            raise KeyError("domain %r is not registered" % domain_id)
        return self.forward_streams(images, upto=domain_id)[domain_id][:, 0, :]

    def merged_feature_tokens(self, images):
        return merge_outputs(self.forward_streams(images))[:, 0, :]

    def features(self, images, domain_id=None):
        """Feature rows for evaluation: one stream, or the merged mean."""
        with T.no_grad():
            if domain_id is None:
                return self.merged_feature_tokens(images).data
            return self.stream_feature_tokens(images, domain_id).data

    def head_forward(self, feature, domain_id):
        if not 0 <= domain_id < len(self.domains):
            raise KeyError("domain %r is not registered" % domain_id)
        dom = self.domains[domain_id]
        return T.matmul(feature, dom.head_w) + dom.head_b

    def loss(self, images, labels):
        """Cross-entropy of the newest domain's stream through its head."""
        j = len(self.domains) - 1
        feats = self.stream_feature_tokens(images, j)
        return T.cross_entropy(self.head_forward(feats, j), labels)

    def predict(self, images, domain_id=None):
        """Head-based label predictions for one domain (default newest)."""
        j = len(self.domains) - 1 if domain_id is None else domain_id
        with T.no_grad():
            feats = self.stream_feature_tokens(images, j)
            return np.argmax(self.head_forward(feats, j).data, axis=1)

    # accounting -----------------------------------------------------------

    def trainable_parameters(self):
        return [p for p in self._all_parameter_list() if not p.frozen]

    def _all_parameter_list(self):
        out = list(self.backbone.parameters())
        for dom in self.domains:
            out.extend(dom.parameters())
        return out

    def all_parameters(self):
        return {p.name: p for p in self._all_parameter_list()}

    def param_counts(self):
        return param_report(self)


def param_report(model):
    """Trainable/frozen/total parameter counts, whole-model and per part."""

    def bucket(params):
        t = sum(p.data.size for p in params if not p.frozen)
        f = sum(p.data.size for p in params if p.frozen)
        return {"trainable": t, "frozen": f, "total": t + f}

    report = {"backbone": bucket(model.backbone.parameters()), "domains": []}
    for dom in getattr(model, "domains", []):
        entry = bucket(dom.parameters())
        entry["domain"] = dom.domain_id
        report["domains"].append(entry)
    report["model"] = bucket(
        model._all_parameter_list()
        if hasattr(model, "_all_parameter_list")
        else list(model.all_parameters().values())
    )
    return report
