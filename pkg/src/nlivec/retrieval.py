"""Caption-image retrieval on top of frozen sentence vectors.

Captions x and images y are projected by learned linear maps U and V into a
joint space and compared by cosine similarity s.  Training minimises the
bidirectional hinge ranking loss with sampled contrastive terms; evaluation
reports Recall@K and median rank averaged over random folds of the test
images.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

log = logging.getLogger(__name__)


class RetrievalError(ValueError):
    pass


@dataclass
class RetrievalConfig:
    margin: float = 0.2
    n_contrastive: int = 30
    joint_dim: int | None = None
    lr: float = 0.1
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise RetrievalError("margin must be positive")
        if self.n_contrastive < 1:
            raise RetrievalError("need at least one contrastive term")


@dataclass
class ProjectionPair:
    U: Tensor  # caption side, (caption_dim, joint_dim)
    V: Tensor  # image side, (image_dim, joint_dim)
    margin: float = 0.2
    n_contrastive: int = 30

    def __post_init__(self):
        if self.U.shape[1] != self.V.shape[1]:
            raise nx.ShapeError("ProjectionPair", [self.U.shape, self.V.shape], "joint dims differ")

    def parameters(self):
        return [self.U, self.V]


def init_projection(caption_dim, image_dim, config: RetrievalConfig) -> ProjectionPair:
    rng = np.random.default_rng(config.seed)
    joint = config.joint_dim or caption_dim
    U = Tensor(rng.uniform(-1, 1, (caption_dim, joint)) / np.sqrt(caption_dim), requires_grad=True)
    V = Tensor(rng.uniform(-1, 1, (image_dim, joint)) / np.sqrt(image_dim), requires_grad=True)
    return ProjectionPair(U, V, config.margin, config.n_contrastive)


def l2_normalize(x):
    x = nx.as_tensor(x)
    sq = (x * x).sum(axis=-1, keepdims=True)
    if np.any(sq.data == 0):
        raise RetrievalError("zero-norm projected vector; cosine similarity undefined")
    return x / nx.sqrt(sq)


def similarity(captions, images, proj: ProjectionPair):
    """(N_captions, N_images) cosine similarities in the joint space."""
    p = l2_normalize(nx.as_tensor(captions) @ proj.U)
    q = l2_normalize(nx.as_tensor(images) @ proj.V)
    return p @ q.T


def sample_negatives(owner, k, rng):
    """Contrastive indices for every row of a batch of (caption, image) pairs.

    Returns ``(caption_neg, image_neg)``, each (N, k).  ``caption_neg[n]``
    indexes captions of other images; ``image_neg[n]`` indexes rows that
    carry k distinct images, none of them row n's image.
    """
    owner = np.asarray(owner)
    n = len(owner)
    uniq, first = np.unique(owner, return_index=True)
    if len(uniq) < k + 1:
        raise RetrievalError(f"need at least k+1={k + 1} distinct images in a batch, got {len(uniq)}")
    cap_neg = np.empty((n, k), dtype=np.int64)
    img_neg = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        others = np.flatnonzero(owner != owner[i])
        if len(others) < k:
            raise RetrievalError(f"only {len(others)} negative captions available for k={k}")
        cap_neg[i] = rng.choice(others, size=k, replace=False)
        reps = first[uniq != owner[i]]
        img_neg[i] = rng.choice(reps, size=k, replace=False)
    return cap_neg, img_neg


def hinge_loss_from_similarity(S, caption_neg, image_neg, margin):
    """Sum of both hinge families given the batch similarity matrix.

    ``S[i, j]`` = s(Ux_i, Vy_j); row n of the batch is the positive pair
    (x_n, y_n).
    """
    S = nx.as_tensor(S)
    n = S.shape[0]
    rows = np.arange(n)
    pos = S[rows, rows].reshape(n, 1)
    # image y_n as anchor against captions of other images
    neg_caps = S[caption_neg, rows[:, None]]
    # caption x_n as anchor against other images
    neg_imgs = S[rows[:, None], image_neg]
    t1 = nx.relu(margin - pos + neg_caps)
    t2 = nx.relu(margin - pos + neg_imgs)
    return t1.sum() + t2.sum()


def ranking_loss(captions, images, proj: ProjectionPair, caption_neg, image_neg):
    """Bidirectional hinge ranking loss over a batch of positive pairs."""
    S = similarity(captions, images, proj)
    return hinge_loss_from_similarity(S, caption_neg, image_neg, proj.margin)


def hinge_loss_bruteforce(S, caption_neg, image_neg, margin):
    """Double loop over the same terms as :func:`hinge_loss_from_similarity`."""
    S = np.asarray(S)
    total = 0.0
    for n in range(S.shape[0]):
        for k in caption_neg[n]:
            total += max(0.0, margin - S[n, n] + S[k, n])
        for k in image_neg[n]:
            total += max(0.0, margin - S[n, n] + S[n, k])
    return total


# ---------------------------------------------------------------------------
# Ranking metrics
# ---------------------------------------------------------------------------


def gold_ranks(scores, gold_mask):
    """1-based rank of the best gold candidate per query row.

    Ties with non-gold candidates count against the gold (pessimistic).
    """
    scores = np.asarray(scores, dtype=float)
    gold_mask = np.asarray(gold_mask, dtype=bool)
    if not gold_mask.any(axis=1).all():
        raise RetrievalError("every query needs at least one gold candidate")
    best = np.where(gold_mask, scores, -np.inf).max(axis=1, keepdims=True)
    higher = (scores > best).sum(axis=1)
    tied = ((scores == best) & ~gold_mask).sum(axis=1)
    return higher + tied + 1


def recall_metrics(ranks, Ks, pool_size):
    out = {}
    for K in Ks:
        if K > pool_size:
            raise RetrievalError(f"K={K} exceeds candidate pool of {pool_size}")
        out[f"R@{K}"] = float(np.mean(ranks <= K))
    out["MedR"] = float(np.median(ranks))
    return out


def metrics_from_similarity(S, owner, Ks=(1, 5, 10)):
    """Both retrieval directions for one fold.

    ``S`` is (N_captions, M_images); ``owner[c]`` is the column of caption c's
    image.
    """
    S = np.asarray(S, dtype=float)
    owner = np.asarray(owner)
    n_cap, n_img = S.shape
    gold = owner[:, None] == np.arange(n_img)[None, :]
    image_ranks = gold_ranks(S, gold)  # caption query -> images
    caption_ranks = gold_ranks(S.T, gold.T)  # image query -> captions
    return {
        "caption_retrieval": recall_metrics(caption_ranks, Ks, n_cap),
        "image_retrieval": recall_metrics(image_ranks, Ks, n_img),
    }


def image_folds(n_images, splits, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_images)
    if splits < 1 or splits > n_images:
        raise RetrievalError(f"cannot split {n_images} images into {splits} folds")
    return np.array_split(perm, splits)


def evaluate_retrieval(proj, images, captions, owner, Ks=(1, 5, 10), splits=5, seed=0):
    """Recall@K and MedR per direction, averaged over seeded image folds."""
    images = np.asarray(images, dtype=float)
    captions = np.asarray(captions, dtype=float)
    owner = np.asarray(owner)
    folds = []
    with nx.no_grad():
        for fold in image_folds(len(images), splits, seed):
            col = {img: j for j, img in enumerate(fold)}
            cap_idx = np.flatnonzero(np.isin(owner, fold))
            fold_owner = np.array([col[o] for o in owner[cap_idx]])
            S = similarity(captions[cap_idx], images[fold], proj).data
            folds.append(metrics_from_similarity(S, fold_owner, Ks))
    out = {}
    for direction in ("caption_retrieval", "image_retrieval"):
        keys = folds[0][direction].keys()
        out[direction] = {k: float(np.mean([f[direction][k] for f in folds])) for k in keys}
    out["folds"] = len(folds)
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RetrievalResult:
    projection: ProjectionPair
    history: list = field(default_factory=list)
    best_epoch: int = 0


def _batches(order, size):
    chunks = [order[s : s + size] for s in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < size:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train_retrieval(train, val, config: RetrievalConfig | None = None) -> RetrievalResult:
    """Fit U and V by SGD on the ranking loss; keep the best validation epoch.

    ``train`` and ``val`` are ``(images, captions, owner)`` triples.
    Negatives are resampled every epoch from a generator seeded by
    (seed, epoch).  Model selection uses the validation recall sum, then the
    training loss.
    """
    config = config or RetrievalConfig()
    images, captions, owner = (np.asarray(a) for a in train)
    if len(np.unique(owner)) < config.n_contrastive + 1:
        raise RetrievalError(
            f"fewer than k+1={config.n_contrastive + 1} training images; cannot sample negatives"
        )
    proj = init_projection(captions.shape[1], images.shape[1], config)
    opt = nx.OptimizerState("sgd", lr=config.lr, epoch_decay=1.0)
    v_images, v_captions, v_owner = (np.asarray(a) for a in val)
    v_splits = 1
    best_key, best = None, None
    history = []
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(captions))
        total = 0.0
        for idx in _batches(order, config.batch_size):
            cap_neg, img_neg = sample_negatives(owner[idx], config.n_contrastive, rng)
            nx.zero_grads(proj.parameters())
            with nx.Graph() as g:
                loss = ranking_loss(captions[idx], images[owner[idx]], proj, cap_neg, img_neg)
                scaled = loss / float(len(idx))
                nx.backward(g, scaled)
            nx.sgd_step(proj.parameters(), None, opt)
            total += loss.item()
        ks = tuple(k for k in (1, 5, 10) if k <= len(v_images))
        metrics = evaluate_retrieval(proj, v_images, v_captions, v_owner, ks, v_splits, config.seed)
        score = sum(v for d in ("caption_retrieval", "image_retrieval") for k, v in metrics[d].items() if k.startswith("R@"))
        history.append({"epoch": epoch, "loss": total, "val_rsum": score})
        log.info("retrieval epoch %d loss %.4f val rsum %.3f", epoch, total, score)
        # ties on validation recall go to the lower training loss
        key = (score, -total)
        if best_key is None or key > best_key:
            best_key = key
            best = (epoch, proj.U.data.copy(), proj.V.data.copy())
    epoch, U, V = best
    out = ProjectionPair(Tensor(U, requires_grad=True), Tensor(V, requires_grad=True), config.margin, config.n_contrastive)
    return RetrievalResult(out, history, epoch)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_MAGIC = b"NLVFEAT1"


def write_image_features(path, ids, matrix, binary=False):
    """Text: ``count dim`` header then ``id v1 .. vd`` rows.  Binary: magic,
    little-endian int64 count and dim, then float64 rows (ids are row numbers)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if binary:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<qq", *matrix.shape))
            fh.write(matrix.astype("<f8").tobytes())
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for i, row in zip(ids, matrix):
            fh.write(str(i) + " " + " ".join(repr(float(v)) for v in row) + "\n")


def read_image_features(path):
    """Returns (ids, matrix) from either image-feature format."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC))
        if head == _MAGIC:
            count, dim = struct.unpack("<qq", fh.read(16))
            data = np.frombuffer(fh.read(), dtype="<f8")
            if data.size != count * dim:
                raise RetrievalError(f"{path}: expected {count}x{dim} values, found {data.size}")
            return [str(i) for i in range(count)], data.reshape(count, dim).astype(np.float64)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise RetrievalError(f"{path}: first line must be 'count dim'")
        count, dim = int(header[0]), int(header[1])
        ids, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise RetrievalError(f"{path}:{lineno}: expected id + {dim} values")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    if len(rows) != count:
        raise RetrievalError(f"{path}: header says {count} rows, found {len(rows)}")
    return ids, np.array(rows, dtype=np.float64).reshape(count, dim)


def read_captions(path):
    """``image_id<TAB>caption`` lines -> list of (image_id, caption)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].strip():
                raise RetrievalError(f"{path}:{lineno}: expected 'image_id<TAB>caption'")
            out.append((parts[0], parts[1]))
    return out


def read_split_assignment(path):
    """``image_id<TAB>train|val|test`` lines -> dict."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 or parts[1] not in ("train", "val", "test"):
                raise RetrievalError(f"{path}:{lineno}: expected 'image_id<TAB>train|val|test'")
            out[parts[0]] = parts[1]
    return out
