"""Histogram-based gradient boosted trees for binary classification.

Self-contained trainer/predictor tuned for the engine's 43-slot feature
vectors: second-order boosting on logistic loss, best-first leaf growth,
per-feature histogram split search, and learned routing for missing values
(NaN).  Models serialize to a line-oriented text file and round-trip
bit-exactly.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np


class CorruptModel(Exception):
    pass


class DegenerateDataset(Exception):
    """Training requires both labels to be present."""


@dataclass
class GbdtParams:
    num_trees: int = 64
    max_leaves: int = 31
    min_samples_leaf: int = 20
    learning_rate: float = 0.1
    histogram_bins: int = 64
    l2_reg: float = 1.0

    def validate(self) -> None:
        for name in ("num_trees", "max_leaves", "min_samples_leaf",
                     "histogram_bins"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.l2_reg <= 0:
            raise ValueError("learning_rate and l2_reg must be positive")


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class LifetimeModel:
    """Flat-array tree ensemble; score >= 0.5 classifies as long-lived.

    Node arrays are global across trees (roots indexes each tree's root).
    feature < 0 marks a leaf whose additive value lives in `value`.
    """

    def __init__(self, num_features: int, learning_rate: float,
                 version: int = 0, trained_at_seq: int = 0):
        self.num_features = num_features
        self.learning_rate = learning_rate
        self.base_score = 0.0
        self.version = version
        self.trained_at_seq = trained_at_seq
        self.roots: list[int] = []
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.miss_right: list[int] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.feature_gain: list[float] = [0.0] * num_features
        self.logloss_history: list[float] = []

    @property
    def num_trees(self) -> int:
        return len(self.roots)

    def num_nodes(self) -> int:
        return len(self.feature)

    def predict_one(self, vec) -> float:
        """Probability for one dense vector (NaN = missing)."""
        feat = self.feature
        thr = self.threshold
        miss = self.miss_right
        left = self.left
        right = self.right
        val = self.value
        s = self.base_score
        for n in self.roots:
            f = feat[n]
            while f >= 0:
                v = vec[f]
                if v != v:  # NaN
                    n = right[n] if miss[n] else left[n]
                elif v <= thr[n]:
                    n = left[n]
                else:
                    n = right[n]
                f = feat[n]
            s += val[n]
        return _sigmoid(s)

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        """Margin (pre-sigmoid) scores for a (n, num_features) matrix."""
        n = X.shape[0]
        scores = np.full(n, self.base_score)
        if not self.roots:
            return scores
        feat = np.asarray(self.feature, dtype=np.int32)
        thr = np.asarray(self.threshold)
        miss = np.asarray(self.miss_right, dtype=bool)
        left = np.asarray(self.left, dtype=np.int32)
        right = np.asarray(self.right, dtype=np.int32)
        val = np.asarray(self.value)
        rows = np.arange(n)
        for root in self.roots:
            node = np.full(n, root, dtype=np.int32)
            while True:
                f = feat[node]
                active = f >= 0
                if not active.any():
                    break
                an = node[active]
                af = f[active]
                v = X[rows[active], af]
                nan = np.isnan(v)
                go_left = np.where(nan, ~miss[an], v <= thr[an])
                node[active] = np.where(go_left, left[an], right[an])
            scores += val[node]
        return scores

    def predict(self, X: np.ndarray) -> np.ndarray:
        s = self.raw_scores(X)
        return 1.0 / (1.0 + np.exp(-s))


def train(X: np.ndarray, y: np.ndarray, params: GbdtParams | None = None,
          version: int = 0, trained_at_seq: int = 0) -> LifetimeModel:
    """Boost `num_trees` rounds of Newton steps on binary logloss.

    X: float matrix (NaN = missing), y: 0/1 labels.  Deterministic for a given
    dataset and params: ties in split gain resolve to the lowest feature/bin.
    """
    params = params or GbdtParams()
    params.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X/y shape mismatch")
    if X.shape[0] == 0:
        raise DegenerateDataset("empty dataset")
    if y.min() == y.max():
        raise DegenerateDataset("single-label dataset")

    binned, thresholds = _bin_features(X, params.histogram_bins)
    model = LifetimeModel(X.shape[1], params.learning_rate, version, trained_at_seq)
    score = np.zeros(X.shape[0])
    for _ in range(params.num_trees):
        p = 1.0 / (1.0 + np.exp(-score))
        g = p - y
        h = p * (1.0 - p)
        _grow_tree(model, binned, thresholds, g, h, score, params)
        model.logloss_history.append(
            float(np.mean(np.logaddexp(0.0, score) - y * score)))
    return model


def _bin_features(X: np.ndarray, max_bins: int):
    """Per-feature quantile binning: bin 0 = missing, 1..k = value ranges."""
    n, nf = X.shape
    binned = np.zeros((n, nf), dtype=np.int32)
    thresholds: list[np.ndarray] = []
    for j in range(nf):
        col = X[:, j]
        nan = np.isnan(col)
        finite = col[~nan]
        if finite.size == 0:
            thresholds.append(np.empty(0))
            continue
        uniq = np.unique(finite)
        if uniq.size > max_bins:
            qs = np.quantile(finite, np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
            cand = np.unique(qs)
            if cand.size and cand[-1] >= uniq[-1]:
                cand = cand[:-1]
        else:
            cand = uniq[:-1]  # splitting at the max puts everything left
        thresholds.append(cand.astype(np.float64))
        b = np.searchsorted(cand, col, side="left") + 1
        b[nan] = 0
        binned[:, j] = b
    return binned, thresholds


class _Leaf:
    __slots__ = ("idx", "g_sum", "h_sum", "best")

    def __init__(self, idx, g_sum, h_sum):
        self.idx = idx
        self.g_sum = g_sum
        self.h_sum = h_sum
        self.best = None  # (gain, feature, bin, miss_right)


def _best_split(leaf: _Leaf, binned, thresholds, g, h, params: GbdtParams):
    idx = leaf.idx
    if idx.size < 2 * params.min_samples_leaf:
        return None
    lam = params.l2_reg
    gt, ht, ct = leaf.g_sum, leaf.h_sum, idx.size
    parent = gt * gt / (ht + lam)
    best = None
    gi = g[idx]
    hi = h[idx]
    for j, cand in enumerate(thresholds):
        k = cand.size
        if k == 0:
            continue
        b = binned[idx, j]
        hist_g = np.bincount(b, weights=gi, minlength=k + 2)
        hist_h = np.bincount(b, weights=hi, minlength=k + 2)
        hist_c = np.bincount(b, minlength=k + 2)
        gm, hm, cm = hist_g[0], hist_h[0], hist_c[0]
        lg = np.cumsum(hist_g[1:])[:k]
        lh = np.cumsum(hist_h[1:])[:k]
        lc = np.cumsum(hist_c[1:])[:k]
        for miss_right in (0, 1):
            if miss_right:
                gl, hl, cl = lg, lh, lc
            else:
                gl, hl, cl = lg + gm, lh + hm, lc + cm
            gr, hr, cr = gt - gl, ht - hl, ct - cl
            ok = (cl >= params.min_samples_leaf) & (cr >= params.min_samples_leaf)
            if not ok.any():
                continue
            gain = np.where(ok, gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent,
                            -np.inf)
            t = int(np.argmax(gain))
            if gain[t] > 1e-12 and (best is None or gain[t] > best[0]):
                best = (float(gain[t]), j, t, miss_right)
    return best


def _grow_tree(model: LifetimeModel, binned, thresholds, g, h, score,
               params: GbdtParams) -> None:
    n = binned.shape[0]
    root = _Leaf(np.arange(n), float(g.sum()), float(h.sum()))
    root.best = _best_split(root, binned, thresholds, g, h, params)
    heap: list[tuple[float, int, _Leaf]] = []
    tick = 0
    if root.best:
        heap.append((-root.best[0], tick, root))
    leaves = [root]
    children: dict[int, tuple] = {}  # id(leaf) -> (feature, thr, miss, left, right)
    while heap and len(leaves) < params.max_leaves:
        _, _, leaf = heapq.heappop(heap)
        gain, j, t, miss_right = leaf.best
        b = binned[leaf.idx, j]
        go_left = np.where(b == 0, not miss_right, b <= t + 1)
        li, ri = leaf.idx[go_left], leaf.idx[~go_left]
        lg, lh = float(g[li].sum()), float(h[li].sum())
        lchild = _Leaf(li, lg, lh)
        rchild = _Leaf(ri, leaf.g_sum - lg, leaf.h_sum - lh)
        children[id(leaf)] = (j, float(thresholds[j][t]), miss_right, lchild, rchild)
        model.feature_gain[j] += gain
        leaves.remove(leaf)
        leaves.extend((lchild, rchild))
        for child in (lchild, rchild):
            child.best = _best_split(child, binned, thresholds, g, h, params)
            if child.best:
                tick += 1
                heap.append((-child.best[0], tick, child))

    lam, lr = params.l2_reg, params.learning_rate

    def emit(leaf: _Leaf) -> int:
        node = len(model.feature)
        if id(leaf) in children:
            j, thr, miss_right, lchild, rchild = children[id(leaf)]
            model.feature.append(j)
            model.threshold.append(thr)
            model.miss_right.append(miss_right)
            model.left.append(0)
            model.right.append(0)
            model.value.append(0.0)
            model.left[node] = emit(lchild)
            model.right[node] = emit(rchild)
        else:
            val = -leaf.g_sum / (leaf.h_sum + lam) * lr
            model.feature.append(-1)
            model.threshold.append(0.0)
            model.miss_right.append(0)
            model.left.append(-1)
            model.right.append(-1)
            model.value.append(val)
            score[leaf.idx] += val
        return node

    model.roots.append(emit(root))


def logloss(model: LifetimeModel, X: np.ndarray, y: np.ndarray) -> float:
    s = model.raw_scores(X)
    return float(np.mean(np.logaddexp(0.0, s) - y * s))


MODEL_MAGIC = "lifekv-gbdt-v1"


def model_save(model: LifetimeModel, path: str) -> bytes:
    """Text format: header lines, one line per node, trailing `end` marker."""
    lines = [MODEL_MAGIC,
             f"version {model.version}",
             f"trained_at_seq {model.trained_at_seq}",
             f"num_features {model.num_features}",
             f"learning_rate {model.learning_rate!r}",
             f"base_score {model.base_score!r}",
             f"num_trees {model.num_trees}"]
    for tree_id, root in enumerate(model.roots):
        stack = [root]
        seen = []
        while stack:
            n = stack.pop()
            seen.append(n)
            if model.feature[n] >= 0:
                stack.extend((model.right[n], model.left[n]))
        base = min(seen)
        for n in sorted(seen):
            if model.feature[n] >= 0:
                lines.append(f"{tree_id} {n - base} split {model.feature[n]} "
                             f"{model.threshold[n]!r} {model.miss_right[n]} "
                             f"{model.left[n] - base} {model.right[n] - base} 0.0")
            else:
                lines.append(f"{tree_id} {n - base} leaf -1 0.0 0 -1 -1 "
                             f"{model.value[n]!r}")
    lines.append("end")
    data = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as f:
        f.write(data)
    return data


def model_load(path: str) -> LifetimeModel:
    try:
        with open(path, "rb") as f:
            text = f.read().decode()
    except OSError as e:
        raise CorruptModel(f"cannot read model: {e}") from e
    lines = text.splitlines()
    try:
        if lines[0] != MODEL_MAGIC:
            raise CorruptModel("bad magic")
        if lines[-1] != "end":
            raise CorruptModel("missing end marker (truncated file)")
        header = {}
        i = 1
        while " " in lines[i] and lines[i].split(" ", 1)[0] in (
                "version", "trained_at_seq", "num_features", "learning_rate",
                "base_score", "num_trees"):
            k, v = lines[i].split(" ", 1)
            header[k] = v
            i += 1
        model = LifetimeModel(int(header["num_features"]),
                              float(header["learning_rate"]),
                              int(header["version"]),
                              int(header["trained_at_seq"]))
        model.base_score = float(header["base_score"])
        num_trees = int(header["num_trees"])
        trees: dict[int, dict[int, tuple]] = {}
        for line in lines[i:-1]:
            tree_id, node_id, kind, feat, thr, miss, left, right, val = line.split()
            trees.setdefault(int(tree_id), {})[int(node_id)] = (
                kind, int(feat), float(thr), int(miss), int(left), int(right),
                float(val))
        if len(trees) != num_trees:
            raise CorruptModel(f"expected {num_trees} trees, found {len(trees)}")
        for tree_id in range(num_trees):
            nodes = trees[tree_id]
            base = len(model.feature)
            for local in range(len(nodes)):
                kind, feat, thr, miss, left, right, val = nodes[local]
                if kind == "split":
                    if left not in nodes or right not in nodes:
                        raise CorruptModel("dangling child reference")
                    model.feature.append(feat)
                    model.threshold.append(thr)
                    model.miss_right.append(miss)
                    model.left.append(base + left)
                    model.right.append(base + right)
                    model.value.append(0.0)
                else:
                    model.feature.append(-1)
                    model.threshold.append(0.0)
                    model.miss_right.append(0)
                    model.left.append(-1)
                    model.right.append(-1)
                    model.value.append(val)
            model.roots.append(base)
        return model
    except CorruptModel:
        raise
    except (IndexError, KeyError, ValueError) as e:
        raise CorruptModel(f"model parse failure: {e}") from e
