"""NLI training: shared encoder, matching features, MLP classifier, schedule.

The premise and hypothesis are encoded by the same encoder into u and v; the
classifier sees ``[u; v; |u - v|; u * v]``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .embeddings import embed_many, open_text, tokenize
from .encoders import EncoderConfig, SentenceEncoder, encode_batch, pad_batch
from .numerics import Tensor

log = logging.getLogger(__name__)

LABELS = ("entailment", "neutral", "contradiction")
LABEL_INDEX = {lab: i for i, lab in enumerate(LABELS)}


class NliFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NliExample:
    premise: tuple[str, ...]
    hypothesis: tuple[str, ...]
    label: str

    def __post_init__(self):
        if not self.premise or not self.hypothesis:
            raise NliFormatError("premise and hypothesis must be non-empty")
        if self.label not in LABEL_INDEX:
            raise NliFormatError(f"invalid label {self.label!r}")


def read_nli_file(path, lowercase=False) -> list[NliExample]:
    """``label<TAB>premise<TAB>hypothesis`` per line."""
    out = []
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise NliFormatError(f"{path}:{lineno}: expected 3 tab-separated columns")
            label, prem, hyp = parts
            try:
                out.append(
                    NliExample(
                        tuple(tokenize(prem, lowercase)), tuple(tokenize(hyp, lowercase)), label
                    )
                )
            except NliFormatError as exc:
                raise NliFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_nli_file(path, examples: Sequence[NliExample]):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.label}\t{' '.join(ex.premise)}\t{' '.join(ex.hypothesis)}\n")


# ---------------------------------------------------------------------------
# Model pieces
# ---------------------------------------------------------------------------


def matching_features(u, v):
    """[u; v; |u - v|; u * v] along the last axis."""
    u, v = nx.as_tensor(u), nx.as_tensor(v)
    if u.shape != v.shape:
        raise nx.ShapeError("matching_features", [u.shape, v.shape])
    return nx.concat([u, v, nx.abs_diff(u, v), u * v], axis=-1)


def init_classifier(in_dim, hidden=512, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)

    def uni(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)

    return {
        "clf.W1": uni((in_dim, hidden), in_dim),
        "clf.b1": uni((hidden,), in_dim),
        "clf.W2": uni((hidden, n_classes), hidden),
        "clf.b2": uni((n_classes,), hidden),
    }


def classifier_forward(features, params):
    """Logits of the one-hidden-layer tanh MLP."""
    hidden = nx.tanh(nx.as_tensor(features) @ params["clf.W1"] + params["clf.b1"])
    return hidden @ params["clf.W2"] + params["clf.b2"]


def cross_entropy(logits, labels, reduction="sum"):
    """Softmax cross-entropy of (B, C) logits against integer labels."""
    labels = np.asarray(labels)
    logp = nx.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    total = -picked.sum()
    if reduction == "mean":
        return total / float(len(labels))
    return total


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


@dataclass
class Schedule:
    lr: float = 0.1
    epoch_decay: float = 0.99
    shrink: float = 5.0
    lr_floor: float = 1e-5
    batch_size: int = 64
    max_epochs: int = 50
    hidden: int = 512
    max_grad_norm: float | None = 5.0
    loss_reduction: str = "sum"
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("lr, batch_size and max_epochs must be positive")
        if not 0 < self.epoch_decay <= 1:
            raise ValueError("epoch_decay must lie in (0, 1]")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    dev_acc: float
    lr: float


@dataclass
class TrainState:
    lr: float
    best_dev_acc: float = -1.0
    prev_dev_acc: float | None = None
    epoch: int = 0
    stop: bool = False
    lr_floor: float = 1e-5
    shrink: float = 5.0
    history: list = field(default_factory=list)


def update_lr_schedule(state: TrainState, epoch_dev_acc: float) -> TrainState:
    """End-of-epoch rule: divide lr when dev accuracy drops, stop under the floor.

    The per-epoch multiplicative decay is applied by the caller beforehand.
    """
    if state.prev_dev_acc is not None and epoch_dev_acc < state.prev_dev_acc:
        state.lr /= state.shrink
    state.prev_dev_acc = epoch_dev_acc
    state.best_dev_acc = max(state.best_dev_acc, epoch_dev_acc)
    state.stop = state.lr < state.lr_floor
    return state


def simulate_schedule(dev_accs, lr=0.1, epoch_decay=0.99, shrink=5.0, lr_floor=1e-5):
    """Learning rates after each epoch for a given dev-accuracy trace."""
    state = TrainState(lr=lr, lr_floor=lr_floor, shrink=shrink)
    lrs = []
    for acc in dev_accs:
        state.lr *= epoch_decay
        update_lr_schedule(state, acc)
        lrs.append(state.lr)
        if state.stop:
            break
    return lrs, state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class PreparedPairs(NamedTuple):
    premises: list
    hypotheses: list
    labels: np.ndarray


def prepare_pairs(examples: Sequence[NliExample], vocab, table) -> PreparedPairs:
    if not examples:
        raise ValueError("empty split")
    return PreparedPairs(
        embed_many([e.premise for e in examples], vocab, table),
        embed_many([e.hypothesis for e in examples], vocab, table),
        np.array([LABEL_INDEX[e.label] for e in examples]),
    )


def _pair_logits(encoder: SentenceEncoder, clf, premises, hypotheses):
    n = len(premises)
    x, lens = pad_batch(list(premises) + list(hypotheses))
    vecs = encode_batch(encoder.config, encoder.params, x, lens)
    feats = matching_features(vecs[:n], vecs[n:])
    return classifier_forward(feats, clf)


def predict_nli(encoder, clf, data: PreparedPairs, batch_size=256):
    preds = []
    with nx.no_grad():
        for s in range(0, len(data.labels), batch_size):
            logits = _pair_logits(encoder, clf, data.premises[s : s + batch_size], data.hypotheses[s : s + batch_size])
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def evaluate_nli(encoder, clf, data: PreparedPairs) -> float:
    """Fraction of pairs whose argmax label is correct."""
    if len(data.labels) == 0:
        raise ValueError("empty split")
    return float(np.mean(predict_nli(encoder, clf, data) == data.labels))


class NliResult(NamedTuple):
    encoder: SentenceEncoder
    classifier: dict
    history: list
    best_epoch: int


def train_nli(train: PreparedPairs, dev: PreparedPairs, encoder_config: EncoderConfig, schedule: Schedule | None = None, progress=None) -> NliResult:
    """SGD over shuffled minibatches with the epoch-level lr schedule.

    Returns the encoder and classifier from the epoch with the best dev
    accuracy (earliest on ties) and the per-epoch history.
    """
    schedule = schedule or Schedule()
    if len(train.labels) == 0 or len(dev.labels) == 0:
        raise ValueError("empty split")
    encoder = SentenceEncoder(encoder_config)
    clf = init_classifier(4 * encoder_config.output_dim, schedule.hidden, len(LABELS), seed=encoder_config.seed + 1)
    params = encoder.parameters() + list(clf.values())
    opt = nx.OptimizerState("sgd", lr=schedule.lr, epoch_decay=schedule.epoch_decay)
    state = TrainState(lr=schedule.lr, lr_floor=schedule.lr_floor, shrink=schedule.shrink)
    rng = np.random.default_rng(schedule.seed)
    n = len(train.labels)
    best = None

    for epoch in range(1, schedule.max_epochs + 1):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        opt.lr = state.lr
        for s in range(0, n, schedule.batch_size):
            idx = order[s : s + schedule.batch_size]
            nx.zero_grads(params)
            with nx.Graph() as g:
                logits = _pair_logits(
                    encoder, clf, [train.premises[i] for i in idx], [train.hypotheses[i] for i in idx]
                )
                loss = cross_entropy(logits, train.labels[idx], schedule.loss_reduction)
                nx.backward(g, loss)
            if schedule.max_grad_norm:
                nx.clip_grad_norm(params, schedule.max_grad_norm)
            nx.sgd_step(params, None, opt)
            total_loss += loss.item() * (len(idx) if schedule.loss_reduction == "mean" else 1)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == train.labels[idx]))
        nx.zero_grads(params)
        dev_acc = evaluate_nli(encoder, clf, dev)

        state.epoch = epoch
        if dev_acc > state.best_dev_acc:
            best = (epoch, _snapshot(encoder.params), _snapshot(clf))
        state.lr *= schedule.epoch_decay
        update_lr_schedule(state, dev_acc)
        rec = EpochRecord(epoch, total_loss / n, correct / n, dev_acc, state.lr)
        state.history.append(rec)
        log.info("epoch %d loss %.4f train %.4f dev %.4f lr %.3g", epoch, rec.train_loss, rec.train_acc, dev_acc, state.lr)
        if progress is not None:
            progress(rec)
        if state.stop:
            break

    best_epoch, enc_params, clf_params = best
    return NliResult(SentenceEncoder(encoder_config, enc_params), clf_params, state.history, best_epoch)


def _snapshot(params):
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def history_rows(history):
    return [asdict(r) for r in history]
