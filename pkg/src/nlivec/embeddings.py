"""Fixed word vectors in the whitespace text format (``token v1 v2 ... vd``)."""

from __future__ import annotations

import gzip
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import Tensor


class VectorFormatError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Token <-> row index map.  Known tokens occupy 0..N-1, OOV is row N."""

    index_to_token: list[str] = field(default_factory=list)
    token_to_index: dict[str, int] = field(default_factory=dict)

    @property
    def oov_index(self):
        return len(self.index_to_token)

    def __len__(self):
        return len(self.index_to_token)

    def __contains__(self, token):
        return token in self.token_to_index

    def add(self, token):
        if token not in self.token_to_index:
            self.token_to_index[token] = len(self.index_to_token)
            self.index_to_token.append(token)
        return self.token_to_index[token]

    def lookup(self, token):
        return self.token_to_index.get(token, self.oov_index)

    def indices(self, tokens):
        return [self.lookup(t) for t in tokens]


def build_vocabulary(sentences: Iterable[Iterable[str]]) -> Vocabulary:
    vocab = Vocabulary()
    for sent in sentences:
        for tok in sent:
            vocab.add(tok)
    return vocab


@dataclass
class EmbeddingTable:
    """(N+1) x dim read-only matrix; the final row is the zero OOV vector."""

    matrix: np.ndarray

    trainable = False

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=np.float64)
        if not np.all(np.isfinite(self.matrix)):
            raise VectorFormatError("embedding table contains non-finite values")
        self.matrix.flags.writeable = False

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __len__(self):
        return self.matrix.shape[0]


def open_text(path):
    """Open a UTF-8 text file, transparently gunzipping ``*.gz``."""
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def load_word_vectors(source, expected_dim=None, restrict_to=None):
    """Parse word vectors from a path, open file, or iterable of lines.

    The dimension is taken from the first entry unless ``expected_dim`` is
    given.  Tokens may contain spaces (the last ``dim`` fields are the vector).
    A leading ``count dim`` header line is skipped.  ``restrict_to`` keeps only
    the listed tokens.  Returns ``(Vocabulary, EmbeddingTable)``.
    """
    if isinstance(source, (str, Path)):
        with open_text(source) as fh:
            return load_word_vectors(fh, expected_dim, restrict_to)

    vocab = Vocabulary()
    rows: list[list[float]] = []
    dim = expected_dim
    for lineno, line in enumerate(source, start=1):
        fields = line.rstrip("\r\n").rstrip(" ").split(" ")
        if not fields or fields == [""]:
            continue
        if lineno == 1 and len(fields) == 2 and all(f.isdigit() for f in fields):
            if expected_dim is None or int(fields[1]) == expected_dim:
                dim = dim or int(fields[1])
                continue
        if dim is None:
            dim = len(fields) - 1
            if dim < 1:
                raise VectorFormatError(f"line {lineno}: no vector values")
        if len(fields) < dim + 1:
            raise VectorFormatError(
                f"line {lineno}: expected {dim} values, found {len(fields) - 1}"
            )
        token = " ".join(fields[:-dim])
        if restrict_to is not None and token not in restrict_to:
            continue
        try:
            values = [float(v) for v in fields[-dim:]]
        except ValueError:
            raise VectorFormatError(f"line {lineno}: expected {dim} values") from None
        if len(fields) > dim + 1 and any(_is_number(f) for f in fields[1:-dim]):
            raise VectorFormatError(
                f"line {lineno}: expected {dim} values, found {len(fields) - 1}"
            )
        if token in vocab:
            warnings.warn(f"line {lineno}: duplicate token {token!r}; keeping first occurrence")
            continue
        vocab.add(token)
        rows.append(values)
    if dim is None:
        raise VectorFormatError("no word vectors found")
    matrix = np.zeros((len(rows) + 1, dim))
    if rows:
        matrix[:-1] = np.array(rows)
    return vocab, EmbeddingTable(matrix)


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def tokenize(sentence: str, lowercase=False) -> list[str]:
    """Whitespace split; corpora are expected to be pre-tokenized."""
    if lowercase:
        sentence = sentence.lower()
    return sentence.split()


def embed_sequence(tokens, vocab: Vocabulary, table: EmbeddingTable) -> Tensor:
    """(T, dim) constant tensor of word vectors; unknown tokens map to zeros."""
    if len(tokens) == 0:
        raise ValueError("empty sentence")
    return Tensor(table.matrix[vocab.indices(tokens)])


def embed_many(sentences, vocab, table):
    """List of (T_i, dim) arrays for pre-tokenized sentences."""
    out = []
    for toks in sentences:
        if len(toks) == 0:
            raise ValueError("empty sentence")
        out.append(table.matrix[vocab.indices(toks)])
    return out


def write_word_vectors(path, tokens, matrix, precision=6):
    """Write vectors in the text format (used for fixtures)."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok, row in zip(tokens, matrix):
            fh.write(tok + " " + " ".join(f"{v:.{precision}f}" for v in row) + "\n")
