"""Sentence encoders mapping an embedded sentence (T x d) to a fixed vector.

Seven architectures are available:

========================  ==============================================
kind                      representation
========================  ==============================================
``LSTM_LAST``             last hidden state of a forward LSTM
``GRU_LAST``              last hidden state of a forward GRU
``BIGRU_LAST``            [forward-GRU last ; backward-GRU last]
``BILSTM_MEAN``           mean over time of BiLSTM states
``BILSTM_MAX``            per-dimension max over time of BiLSTM states
``INNER_ATTENTION``       4 attention views over BiLSTM states, concatenated
``HCONVNET``              4 stacked convolutions, max-pooled at every level
========================  ==============================================

``output_dim`` is always the length of the final sentence vector.
Sentences are processed as right-padded batches; every operation that mixes
timesteps is masked, so a batch encodes each sentence exactly as it would be
encoded alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

KINDS = (
    "LSTM_LAST",
    "GRU_LAST",
    "BIGRU_LAST",
    "BILSTM_MEAN",
    "BILSTM_MAX",
    "INNER_ATTENTION",
    "HCONVNET",
)
MAX_POOL_KINDS = ("BILSTM_MAX", "HCONVNET")
N_VIEWS = 4
N_CONV_LAYERS = 4
KERNEL_WIDTH = 3

# required divisor of output_dim per kind
_DIVISOR = {
    "LSTM_LAST": 1,
    "GRU_LAST": 1,
    "BIGRU_LAST": 2,
    "BILSTM_MEAN": 2,
    "BILSTM_MAX": 2,
    "INNER_ATTENTION": 2 * N_VIEWS,
    "HCONVNET": N_CONV_LAYERS,
}


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "BILSTM_MAX"
    embed_dim: int = 300
    output_dim: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EncoderError(f"unknown encoder kind {self.kind!r}; expected one of {KINDS}")
        if self.embed_dim < 1 or self.output_dim < 1:
            raise EncoderError("embed_dim and output_dim must be positive")
        div = _DIVISOR[self.kind]
        if self.output_dim % div:
            raise EncoderError(f"{self.kind} needs output_dim divisible by {div}, got {self.output_dim}")

    @property
    def hidden_size(self):
        """Per-direction recurrent size, or feature maps per conv layer."""
        return self.output_dim // _DIVISOR[self.kind]

    def to_dict(self):
        return asdict(self)


def validate_dim(kind, dim):
    """Raise EncoderError unless ``dim`` is a legal output size for ``kind``."""
    EncoderConfig(kind=kind, embed_dim=1, output_dim=dim)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _rnn_params(rng, prefix, cell, d, h):
    gates = 4 if cell == "lstm" else 3
    p = {f"{prefix}.W_x": _uniform(rng, (d, gates * h), d)}
    if cell == "lstm":
        p[f"{prefix}.W_h"] = _uniform(rng, (h, 4 * h), h)
    else:
        p[f"{prefix}.U_rz"] = _uniform(rng, (h, 2 * h), h)
        p[f"{prefix}.U_n"] = _uniform(rng, (h, h), h)
    p[f"{prefix}.b"] = _uniform(rng, (gates * h,), h)
    return p


def init_params(config: EncoderConfig) -> dict[str, Tensor]:
    """Seeded uniform(+-1/sqrt(fan_in)) initialisation."""
    rng = np.random.default_rng(config.seed)
    d, h, kind = config.embed_dim, config.hidden_size, config.kind
    params: dict[str, Tensor] = {}
    if kind == "LSTM_LAST":
        params.update(_rnn_params(rng, "fwd", "lstm", d, h))
    elif kind == "GRU_LAST":
        params.update(_rnn_params(rng, "fwd", "gru", d, h))
    elif kind == "BIGRU_LAST":
        params.update(_rnn_params(rng, "fwd", "gru", d, h))
        params.update(_rnn_params(rng, "bwd", "gru", d, h))
    elif kind in ("BILSTM_MEAN", "BILSTM_MAX", "INNER_ATTENTION"):
        params.update(_rnn_params(rng, "fwd", "lstm", d, h))
        params.update(_rnn_params(rng, "bwd", "lstm", d, h))
        if kind == "INNER_ATTENTION":
            k = 2 * h
            params["attn.W"] = _uniform(rng, (2 * h, k), 2 * h)
            params["attn.b"] = _uniform(rng, (k,), 2 * h)
            params["attn.context"] = _uniform(rng, (k, N_VIEWS), k)
    elif kind == "HCONVNET":
        c = d
        for layer in range(N_CONV_LAYERS):
            fan_in = KERNEL_WIDTH * c
            params[f"conv{layer}.W"] = _uniform(rng, (fan_in, h), fan_in)
            params[f"conv{layer}.b"] = _uniform(rng, (h,), fan_in)
            c = h
    return params


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------


def pad_batch(sequences: Sequence[np.ndarray]):
    """Right-pad a list of (T_i, d) arrays into (B, T_max, d) plus lengths."""
    if not sequences:
        raise EncoderError("empty batch")
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if lengths.min() < 1:
        raise EncoderError("T=0: every sentence needs at least one token")
    d = sequences[0].shape[1]
    out = np.zeros((len(sequences), int(lengths.max()), d))
    for i, s in enumerate(sequences):
        out[i, : len(s)] = s
    return out, lengths


def length_mask(lengths, t_max):
    return np.arange(t_max)[None, :] < np.asarray(lengths)[:, None]


def _reverse_index(lengths, t_max):
    """Per-row index that reverses the first ``len`` steps and keeps padding."""
    t = np.arange(t_max)[None, :]
    lens = np.asarray(lengths)[:, None]
    return np.where(t < lens, lens - 1 - t, t)


# ---------------------------------------------------------------------------
# Recurrent cells
# ---------------------------------------------------------------------------


def _lstm_scan(params, prefix, x):
    W_h = params[f"{prefix}.W_h"]
    hsize = W_h.shape[0]
    xw = x @ params[f"{prefix}.W_x"] + params[f"{prefix}.b"]
    h = c = None
    states = []
    for t in range(x.shape[1]):
        z = xw[:, t]
        if h is not None:
            z = z + h @ W_h
        s = nx.sigmoid(z[:, : 3 * hsize])
        g = nx.tanh(z[:, 3 * hsize :])
        i, f, o = s[:, :hsize], s[:, hsize : 2 * hsize], s[:, 2 * hsize :]
        c = i * g if c is None else f * c + i * g
        h = o * nx.tanh(c)
        states.append(h)
    return nx.stack(states, axis=1)


def _gru_scan(params, prefix, x):
    U_rz, U_n = params[f"{prefix}.U_rz"], params[f"{prefix}.U_n"]
    hsize = U_n.shape[0]
    xw = x @ params[f"{prefix}.W_x"] + params[f"{prefix}.b"]
    h = None
    states = []
    for t in range(x.shape[1]):
        zt = xw[:, t]
        if h is None:
            # h_0 = 0: reset gate and recurrent terms vanish
            u = nx.sigmoid(zt[:, hsize : 2 * hsize])
            n = nx.tanh(zt[:, 2 * hsize :])
            h = (1.0 - u) * n
        else:
            rz = nx.sigmoid(zt[:, : 2 * hsize] + h @ U_rz)
            r, u = rz[:, :hsize], rz[:, hsize:]
            n = nx.tanh(zt[:, 2 * hsize :] + (r * h) @ U_n)
            h = u * h + (1.0 - u) * n
        states.append(h)
    return nx.stack(states, axis=1)


_SCANS = {"lstm": _lstm_scan, "gru": _gru_scan}


def rnn_forward(cell, params, inputs, lengths=None, direction="forward", prefix=None):
    """Hidden states (B, T, H) of a unidirectional recurrent pass.

    ``inputs`` is (B, T, d) or a single (T, d) sentence.  With
    ``direction="backward"`` each sentence is read from its last real token to
    its first and the states are re-aligned so ``out[:, t]`` sits at token t.
    """
    shape = inputs.shape if hasattr(inputs, "shape") else np.shape(inputs)
    if len(shape) < 2 or shape[-2] == 0:
        raise EncoderError("T=0: cannot run a recurrent pass over an empty sentence")
    x = nx.as_tensor(inputs)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    bsz, t_max = x.shape[0], x.shape[1]
    if t_max == 0:
        raise EncoderError("T=0: cannot run a recurrent pass over an empty sentence")
    if lengths is None:
        lengths = np.full(bsz, t_max)
    if prefix is None:
        prefix = "fwd" if direction == "forward" else "bwd"
    scan = _SCANS[cell.lower()]
    if direction == "forward":
        states = scan(params, prefix, x)
    elif direction == "backward":
        rows = np.arange(bsz)[:, None]
        rev = _reverse_index(lengths, t_max)
        states = scan(params, prefix, x[rows, rev])[rows, rev]
    else:
        raise EncoderError(f"unknown direction {direction!r}")
    return states[0] if single else states


# ---------------------------------------------------------------------------
# Readouts
# ---------------------------------------------------------------------------


def encode_last(states, lengths=None):
    """h_T for every sentence of a (B, T, H) forward-state batch."""
    states = nx.as_tensor(states)
    if states.ndim == 2:
        return states[states.shape[0] - 1]
    bsz = states.shape[0]
    if lengths is None:
        lengths = np.full(bsz, states.shape[1])
    return states[np.arange(bsz), np.asarray(lengths) - 1]


def pool(states, mode="MAX", lengths=None):
    """Temporal pooling of (T, H) or (B, T, H) states.

    MAX returns a tensor whose ``argmax`` attribute holds the selected
    timestep per dimension (ties go to the earliest timestep).
    """
    states = nx.as_tensor(states)
    axis = 0 if states.ndim == 2 else 1
    mask = None
    if lengths is not None and states.ndim == 3:
        mask = length_mask(lengths, states.shape[1])
    mode = mode.upper()
    if mode == "MAX":
        return nx.max_over_axis(states, axis=axis, mask=mask)
    if mode == "MEAN":
        if mask is None:
            return nx.mean_over_axis(states, axis=axis)
        m = Tensor(mask[:, :, None].astype(float))
        return (states * m).sum(axis=1) / Tensor(np.asarray(lengths, dtype=float)[:, None])
    raise EncoderError(f"unknown pooling mode {mode!r}")


def attention_weights(states, params, lengths=None):
    """Softmax weights (B, T, views) of the inner-attention readout."""
    keys = nx.tanh(states @ params["attn.W"] + params["attn.b"])
    logits = keys @ params["attn.context"]
    mask = None if lengths is None else length_mask(lengths, states.shape[1])
    return nx.softmax(logits, axis=1, mask=mask)


def inner_attention(states, params, lengths=None):
    """Concatenation of the attention views sum_i alpha_i h_i."""
    states = nx.as_tensor(states)
    single = states.ndim == 2
    if single:
        states = states.reshape(1, *states.shape)
    alpha = attention_weights(states, params, lengths)
    views = alpha.transpose(0, 2, 1) @ states  # (B, views, H)
    out = views.reshape(states.shape[0], -1)
    return out[0] if single else out


def hconvnet(embedded, params, lengths=None):
    """Four same-padded width-3 ReLU convolutions, max-pooled per level.

    Returns the concatenated levels; ``argmax`` holds the selected timestep of
    every output entry.
    """
    x = nx.as_tensor(embedded)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    bsz, t_max = x.shape[0], x.shape[1]
    if lengths is None:
        lengths = np.full(bsz, t_max)
    mask = length_mask(lengths, t_max)
    m3 = Tensor(mask[:, :, None].astype(float))
    levels, argmaxes = [], []
    half = KERNEL_WIDTH // 2
    for layer in range(N_CONV_LAYERS):
        c = x.shape[2]
        pad = Tensor(np.zeros((bsz, half, c)))
        padded = nx.concat([pad, x * m3, pad], axis=1)
        windows = nx.concat([padded[:, k : k + t_max] for k in range(KERNEL_WIDTH)], axis=2)
        x = nx.relu(windows @ params[f"conv{layer}.W"] + params[f"conv{layer}.b"])
        level = nx.max_over_axis(x, axis=1, mask=mask)
        levels.append(level)
        argmaxes.append(level.argmax)
    out = nx.concat(levels, axis=1)
    out.argmax = np.concatenate(argmaxes, axis=1)
    if single:
        idx = out.argmax[0]
        out = out[0]
        out.argmax = idx
    return out


def conv_layer_maps(embedded, params, layer=0):
    """Pre-pooling feature maps (T, F) of one conv layer for a single sentence."""
    x = nx.as_tensor(embedded)
    for i in range(layer + 1):
        half = KERNEL_WIDTH // 2
        pad = Tensor(np.zeros((half, x.shape[1])))
        padded = nx.concat([pad, x, pad], axis=0)
        t = x.shape[0]
        windows = nx.concat([padded[k : k + t] for k in range(KERNEL_WIDTH)], axis=1)
        x = nx.relu(windows @ params[f"conv{i}.W"] + params[f"conv{i}.b"])
    return x


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


class SentenceVector(NamedTuple):
    values: np.ndarray
    argmax: np.ndarray | None


def encode_batch(config: EncoderConfig, params, embedded, lengths=None):
    """Encode a padded (B, T, d) batch; returns a (B, output_dim) Tensor.

    For max-pooling kinds the result's ``argmax`` is (B, output_dim).
    """
    x = nx.as_tensor(embedded)
    if x.ndim != 3 or x.shape[2] != config.embed_dim:
        raise nx.ShapeError("encode", [x.shape], f"expected (B, T, {config.embed_dim})")
    if lengths is None:
        lengths = np.full(x.shape[0], x.shape[1])
    kind = config.kind
    if kind == "LSTM_LAST":
        return encode_last(rnn_forward("lstm", params, x, lengths), lengths)
    if kind == "GRU_LAST":
        return encode_last(rnn_forward("gru", params, x, lengths), lengths)
    if kind == "BIGRU_LAST":
        fwd = rnn_forward("gru", params, x, lengths, "forward")
        bwd = rnn_forward("gru", params, x, lengths, "backward")
        # the backward pass ends on the first token
        return nx.concat([encode_last(fwd, lengths), bwd[:, 0]], axis=1)
    if kind == "HCONVNET":
        return hconvnet(x, params, lengths)
    fwd = rnn_forward("lstm", params, x, lengths, "forward")
    bwd = rnn_forward("lstm", params, x, lengths, "backward")
    states = nx.concat([fwd, bwd], axis=2)
    if kind == "BILSTM_MAX":
        return pool(states, "MAX", lengths)
    if kind == "BILSTM_MEAN":
        return pool(states, "MEAN", lengths)
    if kind == "INNER_ATTENTION":
        return inner_attention(states, params, lengths)
    raise EncoderError(f"unknown encoder kind {kind!r}")


def bilstm_states(params, embedded, lengths=None):
    """Concatenated BiLSTM states (B, T, 2H) for a padded batch."""
    x = nx.as_tensor(embedded)
    fwd = rnn_forward("lstm", params, x, lengths, "forward")
    bwd = rnn_forward("lstm", params, x, lengths, "backward")
    return nx.concat([fwd, bwd], axis=2)


def encode(config: EncoderConfig, params, embedded) -> SentenceVector:
    """Encode one (T, d) sentence without recording gradients."""
    arr = np.asarray(embedded.data if isinstance(embedded, Tensor) else embedded, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise EncoderError("expected a (T, d) sentence with T >= 1")
    with nx.no_grad():
        out = encode_batch(config, params, arr[None])
    argmax = None if out.argmax is None else out.argmax[0].copy()
    return SentenceVector(out.data[0].copy(), argmax)


def pool_selection_histogram(states, lengths=None):
    """Times each timestep wins the max over every output dimension.

    ``states`` is a (T, H) matrix of hidden states, or an already computed
    argmax vector (1-D integer array) together with ``lengths`` = T.
    """
    arr = np.asarray(states.data if isinstance(states, Tensor) else states)
    if arr.ndim == 1 and np.issubdtype(arr.dtype, np.integer):
        if lengths is None:
            raise EncoderError("argmax input needs the sentence length")
        return np.bincount(arr, minlength=int(lengths))
    if arr.ndim != 2:
        raise EncoderError("expected (T, H) states")
    # np.argmax returns the first maximal index
    return np.bincount(np.argmax(arr, axis=0), minlength=arr.shape[0])


class SentenceEncoder:
    """Configuration plus parameter tensors."""

    def __init__(self, config: EncoderConfig, params=None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def parameters(self):
        return list(self.params.values())

    def __call__(self, embedded, lengths=None):
        return encode_batch(self.config, self.params, embedded, lengths)

    def encode(self, embedded) -> SentenceVector:
        return encode(self.config, self.params, embedded)

    def encode_many(self, sentences: Sequence[np.ndarray], batch_size=128):
        """(N, output_dim) array for a list of (T_i, d) sentences, inference only."""
        out = []
        with nx.no_grad():
            for start in range(0, len(sentences), batch_size):
                x, lens = pad_batch(sentences[start : start + batch_size])
                out.append(encode_batch(self.config, self.params, x, lens).data)
        return np.concatenate(out, axis=0)

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def copy(self):
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return SentenceEncoder(self.config, params)
