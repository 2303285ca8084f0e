"""KNN probing of feature quality and the continual-learning metrics.

Classification quality is measured without heads: training-split features
form a bank, validation features query it, and the majority label among
the k nearest (Euclidean) neighbors wins. Vote ties fall back to the
smaller summed distance, then the smaller label. The accuracy matrix R
collects ``R[stage][domain]`` and the acc/bwt/fwt summary metrics reduce
its final row, diagonal, and superdiagonal.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T

_CHUNK = 128


@dataclass
class FeatureBank:
    features: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)
    domain_id: str = ""

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ValueError("feature bank needs a non-empty (N, d) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must align with feature rows")


def extract_features(model, dataset, domain_id=None, batch_size=64):
    """Run the dataset through ``model.features`` and bank the rows."""
    rows = []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            rows.append(
                model.features(dataset.images[start : start + batch_size], domain_id)
            )
    return FeatureBank(np.concatenate(rows, axis=0), dataset.labels.copy(), dataset.name)


def eval_threads():
    """Worker cap for query-parallel evaluation (CL_ADAPT_THREADS)."""
    env = os.environ.get("CL_ADAPT_THREADS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("CL_ADAPT_THREADS must be >= 1, got %r" % env)
        return n
    return min(4, os.cpu_count() or 1)


def _vote(neighbor_labels, neighbor_dists):
    counts = np.bincount(neighbor_labels)
    best = counts.max()
    cands = np.flatnonzero(counts == best)
    if len(cands) == 1:
        return int(cands[0])
    sums = [neighbor_dists[neighbor_labels == c].sum() for c in cands]
    order = np.lexsort((cands, sums))
    return int(cands[order[0]])


def _classify_chunk(bank, chunk, k):
    d2 = (
        (chunk * chunk).sum(axis=1, keepdims=True)
        - 2.0 * chunk @ bank.features.T
        + (bank.features * bank.features).sum(axis=1)
    )
    near = np.argsort(d2, axis=1, kind="stable")[:, :k]
    out = np.empty(len(chunk), dtype=np.int64)
    for i in range(len(chunk)):
        dists = np.sqrt(np.maximum(d2[i, near[i]], 0.0))
        out[i] = _vote(bank.labels[near[i]], dists)
    return out


def knn_classify(bank, queries, k):
    """Predict a label per query row by k-nearest-neighbor vote."""
    n = bank.features.shape[0]
    if not 1 <= k <= n:
        raise ValueError("k=%d outside [1, %d]" % (k, n))
    queries = np.asarray(queries, dtype=np.float64)
    chunks = [queries[s : s + _CHUNK] for s in range(0, len(queries), _CHUNK)]
    workers = eval_threads()
    if workers == 1 or len(chunks) == 1:
        parts = [_classify_chunk(bank, c, k) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _classify_chunk(bank, c, k), chunks))
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def knn_accuracy(bank, queries, labels, k):
    pred = knn_classify(bank, queries, k)
    return float(np.mean(pred == labels))


class AccuracyMatrix:
    """R[i][j]: accuracy on domain j after finishing training stage i."""

    def __init__(self, domains):
        self.domains = list(domains)
        t = len(self.domains)
        self.R = np.full((t, t), np.nan)

    def set(self, stage, domain, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("accuracy %r outside [0, 1]" % value)
        self.R[stage, domain] = value

    def rows(self):
        for i in range(len(self.domains)):
            for j in range(len(self.domains)):
                if not np.isnan(self.R[i, j]):
                    yield i, self.domains[j], self.R[i, j]


@dataclass
class CLMetrics:
    acc: float
    bwt: Optional[float]
    fwt: Optional[float]


def compute_metrics(R, chance_levels):
    """acc / bwt / fwt from a filled accuracy matrix.

    * acc: mean of the final row
    * bwt: mean over j < T-1 of R[T-1][j] - R[j][j]
    * fwt: mean over j > 0 of R[j-1][j] - chance_levels[j]

    bwt and fwt need at least two stages and are None otherwise.
    """
    R = np.asarray(R, dtype=np.float64)
    t = R.shape[0]
    if R.shape != (t, t) or t < 1:
        raise ValueError("R must be square and non-empty, got %s" % (R.shape,))
    if np.isnan(R[t - 1]).any() or np.isnan(np.diag(R)).any():
        raise ValueError("R has unfilled entries needed by the metrics")
    acc = float(np.mean(R[t - 1]))
    if t < 2:
        return CLMetrics(acc=acc, bwt=None, fwt=None)
    bwt = float(np.mean([R[t - 1, j] - R[j, j] for j in range(t - 1)]))
    if np.isnan([R[j - 1, j] for j in range(1, t)]).any():
        raise ValueError("R is missing superdiagonal entries needed by fwt")
    fwt = float(np.mean([R[j - 1, j] - chance_levels[j] for j in range(1, t)]))
    return CLMetrics(acc=acc, bwt=bwt, fwt=fwt)


def summarize_runs(metrics_list):
    """Mean and population standard deviation per metric over runs."""
    if not metrics_list:
        raise ValueError("summarize_runs needs at least one run")
    out = {}
    for field in ("acc", "bwt", "fwt"):
        vals = [getattr(m, field) for m in metrics_list if getattr(m, field) is not None]
        if vals:
            arr = np.asarray(vals)
            out[field] = {"mean": float(arr.mean()), "std": float(arr.std())}
        else:
            out[field] = {"mean": None, "std": None}
    return out
