"""Transfer evaluation of frozen sentence vectors.

Probes are multinomial logistic regressions fit with Adam on top of fixed
vectors; the L2 penalty is picked on the dev split.  Pair tasks use the NLI
matching features.  Relatedness is learned as a distribution over the
integer scores 1..5 whose expectation is the prediction.  STS is
unsupervised: cosine similarity against gold scores.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

log = logging.getLogger(__name__)

TASK_KINDS = ("BINARY_CLS", "MULTICLASS_CLS", "PAIR_CLS", "RELATEDNESS", "STS_UNSUPERVISED")


class UndefinedCorrelation(ValueError):
    """Correlation of a constant series."""


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def average_ranks(x):
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def correlation(x, y, kind="PEARSON"):
    """Pearson product-moment or Spearman (Pearson on average ranks)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("correlation needs two 1-D series of equal length")
    if len(x) < 2:
        raise ValueError("correlation needs at least 2 points")
    # spread at rounding level (e.g. cos(u, u) across pairs) counts as constant
    for series in (x, y):
        if np.ptp(series) <= 1e-12 * max(1.0, float(np.abs(series).max())):
            raise UndefinedCorrelation("undefined correlation: constant input")
    kind = kind.upper()
    if kind == "SPEARMAN":
        x, y = average_ranks(x), average_ranks(y)
    elif kind != "PEARSON":
        raise ValueError(f"unknown correlation kind {kind!r}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("undefined correlation: constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def cosine_rows(u, v):
    """Row-wise cosine similarity and a mask of rows with a zero-norm vector."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    zero = (nu == 0) | (nv == 0)
    denom = np.where(zero, 1.0, nu * nv)
    cos = np.where(zero, 0.0, np.sum(u * v, axis=-1) / denom)
    return cos, zero


def binary_f1(y_true, y_pred, positive=1):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int(np.sum((y_pred == positive) & (y_true == positive)))
    fp = int(np.sum((y_pred == positive) & (y_true != positive)))
    fn = int(np.sum((y_pred != positive) & (y_true == positive)))
    return f1_from_counts(tp, fp, fn)


def f1_from_counts(tp, fp, fn):
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Logistic-regression probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    l2_grid: tuple = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    batch_size: int | None = 64
    max_epochs: int = 100
    patience: int = 5
    lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.l2_grid = tuple(float(p) for p in self.l2_grid)
        if not self.l2_grid or any(p < 0 for p in self.l2_grid):
            raise ProbeError("l2_grid must be non-empty with penalties >= 0")


@dataclass
class Probe:
    W: np.ndarray
    b: np.ndarray
    penalty: float
    dev_score: float
    epochs: int
    loss_trace: list = field(default_factory=list, repr=False)

    def logits(self, X):
        return np.asarray(X, dtype=float) @ self.W + self.b

    def predict(self, X):
        return np.argmax(self.logits(X), axis=1)

    def predict_proba(self, X):
        z = self.logits(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def _ce_loss(W, b, X, targets, penalty):
    """Mean soft-target cross-entropy plus L2 on the weights."""
    logp = nx.log_softmax(Tensor(X) @ W + b, axis=-1)
    loss = -(logp * Tensor(targets)).sum() / float(len(X))
    if penalty:
        loss = loss + penalty * (W * W).sum()
    return loss


def _train_softmax(X, targets, dev_score, config: ProbeConfig, penalty, rng):
    """Adam on one penalty with dev-based early stopping; returns best Probe."""
    n, d = X.shape
    c = targets.shape[1]
    W = Tensor(np.zeros((d, c)), requires_grad=True)
    b = Tensor(np.zeros(c), requires_grad=True)
    opt = nx.OptimizerState("adam", lr=config.lr, epoch_decay=1.0)
    bs = config.batch_size or n
    best = None
    stale = 0
    trace = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        epoch_loss = 0.0
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            W.grad = b.grad = None
            with nx.Graph() as g:
                loss = _ce_loss(W, b, X[idx], targets[idx], penalty)
                nx.backward(g, loss)
            epoch_loss += loss.item() * len(idx)
            nx.adam_step([W, b], None, opt)
        trace.append(epoch_loss / n)
        score = dev_score(W.data, b.data)
        if best is None or score > best.dev_score:
            best = Probe(W.data.copy(), b.data.copy(), penalty, score, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    best.loss_trace = trace
    return best


def _pick(probes):
    """Highest dev score; ties go to the larger penalty."""
    return max(probes, key=lambda p: (p.dev_score, p.penalty))


def fit_probe(X_train, y_train, X_dev, y_dev, config: ProbeConfig | None = None, n_classes=None) -> Probe:
    """Logistic regression on fixed vectors, L2 chosen by dev accuracy."""
    config = config or ProbeConfig()
    X_train = np.asarray(X_train, dtype=float)
    X_dev = np.asarray(X_dev, dtype=float)
    y_train = np.asarray(y_train, dtype=int)
    y_dev = np.asarray(y_dev, dtype=int)
    if len(np.unique(y_train)) < 2:
        raise ProbeError("training labels contain a single class")
    n_classes = n_classes or int(max(y_train.max(), y_dev.max())) + 1
    targets = np.eye(n_classes)[y_train]

    def dev_acc(W, b):
        return float(np.mean(np.argmax(X_dev @ W + b, axis=1) == y_dev))

    probes = []
    for penalty in config.l2_grid:
        rng = np.random.default_rng(config.seed)
        probes.append(_train_softmax(X_train, targets, dev_acc, config, penalty, rng))
    chosen = _pick(probes)
    log.debug("probe penalties %s -> %g", [(p.penalty, p.dev_score) for p in probes], chosen.penalty)
    return chosen


def sick_r_targets(score, K=5):
    """Sparse distribution over {1..K} whose expectation equals ``score``.

    p[floor(s)] = floor(s) + 1 - s and p[floor(s) + 1] = s - floor(s).
    """
    if not 1 <= score <= K:
        raise ValueError(f"score {score} outside [1, {K}]")
    s = Fraction(score)
    lo = math.floor(s)
    p = np.zeros(K)
    if lo == K:
        p[K - 1] = 1.0
        return p
    upper = s - lo
    p[lo] = float(upper)
    # complement taken in floating point so the pair sums to exactly 1
    p[lo - 1] = 1.0 - p[lo]
    return p


def fit_relatedness(X_train, s_train, X_dev, s_dev, config: ProbeConfig | None = None, K=5) -> Probe:
    """Distribution regressor with KL loss; penalty picked by dev Pearson."""
    config = config or ProbeConfig()
    X_train = np.asarray(X_train, dtype=float)
    X_dev = np.asarray(X_dev, dtype=float)
    targets = np.stack([sick_r_targets(s, K) for s in s_train])
    r = np.arange(1, K + 1, dtype=float)

    def dev_pearson(W, b):
        z = X_dev @ W + b
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        pred = (e / e.sum(axis=1, keepdims=True)) @ r
        try:
            return correlation(pred, s_dev)
        except UndefinedCorrelation:
            return -1.0

    probes = []
    for penalty in config.l2_grid:
        rng = np.random.default_rng(config.seed)
        probes.append(_train_softmax(X_train, targets, dev_pearson, config, penalty, rng))
    return _pick(probes)


def predict_relatedness(probe: Probe, X, K=5):
    return probe.predict_proba(X) @ np.arange(1, K + 1, dtype=float)


def kl_divergence(target, pred_proba):
    """Mean KL(target || pred) over rows, 0 log 0 = 0."""
    target = np.asarray(target, dtype=float)
    pred = np.asarray(pred_proba, dtype=float)
    mask = target > 0
    return float(np.sum(np.where(mask, target * (np.log(np.where(mask, target, 1.0)) - np.log(pred)), 0.0)) / len(target))


# ---------------------------------------------------------------------------
# Task-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class TaskResult:
    name: str
    kind: str
    metric: str
    values: dict
    dev_count: int = 0
    test_count: int = 0
    notes: list = field(default_factory=list)

    @property
    def accuracy(self):
        return self.values.get("dev_acc")

    def to_dict(self):
        return asdict(self)


@dataclass
class Split:
    train: tuple
    dev: tuple
    test: tuple


def seeded_split(n, seed=0, fractions=(0.8, 0.1, 0.1)):
    """Index arrays for a seeded 80/10/10 split."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train : n_train + n_dev], perm[n_train + n_dev :]


def encode_labels(labels):
    classes = sorted(set(labels))
    index = {c: i for i, c in enumerate(classes)}
    return np.array([index[c] for c in labels]), classes


def eval_classification(name, vectors, labels, split_idx, config=None) -> TaskResult:
    """Probe accuracy for a single-sentence task (dev and test)."""
    y, classes = encode_labels(labels)
    tr, dv, te = split_idx
    probe = fit_probe(vectors[tr], y[tr], vectors[dv], y[dv], config, n_classes=len(classes))
    dev_acc = float(np.mean(probe.predict(vectors[dv]) == y[dv]))
    test_acc = float(np.mean(probe.predict(vectors[te]) == y[te]))
    kind = "BINARY_CLS" if len(classes) == 2 else "MULTICLASS_CLS"
    return TaskResult(
        name, kind, "accuracy",
        {"dev_acc": dev_acc, "test_acc": test_acc, "l2": probe.penalty, "classes": len(classes)},
        dev_count=len(dv), test_count=len(te),
    )


def pair_features(u, v):
    """Matching features [u; v; |u - v|; u * v] for arrays of vector pairs."""
    from .nli import matching_features

    with nx.no_grad():
        return matching_features(np.asarray(u, float), np.asarray(v, float)).data


def positive_label_index(classes):
    for cand in ("1", "paraphrase", "true", "yes", "pos", "positive"):
        if cand in classes:
            return classes.index(cand)
    return len(classes) - 1


def eval_pair_task(name, u, v, labels, split_idx, config=None) -> TaskResult:
    """Pair classification on matching features; adds F1 for 2 classes."""
    X = pair_features(u, v)
    y, classes = encode_labels(labels)
    tr, dv, te = split_idx
    probe = fit_probe(X[tr], y[tr], X[dv], y[dv], config, n_classes=len(classes))
    pred_dev = probe.predict(X[dv])
    pred_te = probe.predict(X[te])
    values = {
        "dev_acc": float(np.mean(pred_dev == y[dv])),
        "test_acc": float(np.mean(pred_te == y[te])),
        "l2": probe.penalty,
        "classes": len(classes),
    }
    metric = "accuracy"
    if len(classes) == 2:
        pos = positive_label_index(classes)
        values["dev_f1"] = binary_f1(y[dv], pred_dev, pos)
        values["test_f1"] = binary_f1(y[te], pred_te, pos)
        metric = "acc+f1"
    return TaskResult(name, "PAIR_CLS", metric, values, dev_count=len(dv), test_count=len(te))


def eval_sick_r(name, u, v, scores, split_idx, config=None) -> TaskResult:
    """Pearson of r . softmax(output) against gold relatedness on test."""
    X = pair_features(u, v)
    scores = np.asarray(scores, dtype=float)
    tr, dv, te = split_idx
    probe = fit_relatedness(X[tr], scores[tr], X[dv], scores[dv], config)
    pred = predict_relatedness(probe, X[te])
    pearson = correlation(pred, scores[te], "PEARSON")
    spearman = correlation(pred, scores[te], "SPEARMAN")
    return TaskResult(
        name, "RELATEDNESS", "pearson",
        {"test_pearson": pearson, "test_spearman": spearman, "dev_pearson": probe.dev_score, "l2": probe.penalty},
        dev_count=len(dv), test_count=len(te),
    )


def eval_sts(name, u, v, gold) -> TaskResult:
    """Pearson and Spearman between cosine(u, v) and gold similarity."""
    cos, zero = cosine_rows(u, v)
    notes = []
    if zero.any():
        notes.append(f"{int(zero.sum())} pair(s) with a zero-norm vector scored as cosine 0")
    values = {
        "pearson": correlation(cos, gold, "PEARSON"),
        "spearman": correlation(cos, gold, "SPEARMAN"),
        "zero_norm_pairs": int(zero.sum()),
    }
    return TaskResult(name, "STS_UNSUPERVISED", "pearson+spearman", values, test_count=len(cos), notes=notes)


def aggregate(results: Sequence[TaskResult]):
    """(micro, macro) over accuracy tasks: dev-count-weighted and plain mean."""
    accs = [(r.accuracy, r.dev_count) for r in results if r.accuracy is not None]
    if not accs:
        raise ValueError("no accuracy results to aggregate")
    total = sum(n for _, n in accs)
    if total <= 0:
        raise ValueError("aggregation needs positive dev sample counts")
    macro = sum(a for a, _ in accs) / len(accs)
    micro = sum(a * n for a, n in accs) / total
    return micro, macro


def format_architecture_row(model, dim, nli_dev, nli_test, micro, macro):
    """One tab-separated line: model, dim, NLI dev/test, transfer micro/macro
    (accuracies given as fractions, printed as percentages)."""
    cells = [model, str(dim)] + [f"{100 * x:.1f}" for x in (nli_dev, nli_test, micro, macro)]
    return "\t".join(cells)
