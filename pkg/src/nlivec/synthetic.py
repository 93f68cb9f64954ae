"""Rule-generated corpora for desk-scale experiments and tests.

The vocabulary has ``n_concepts`` concepts, each with a positive and a
negative surface form (``k03p`` / ``k03n``), plus neutral filler tokens.

NLI pairs are built from token sets: a premise mentions a few concepts with
a polarity; the hypothesis repeats some of them (entailment), flips the
polarity of one (contradiction), or mentions a concept absent from the
premise (neutral).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .embeddings import write_word_vectors
from .nli import LABELS, NliExample, write_nli_file
from .retrieval import write_image_features


@dataclass(frozen=True)
class SyntheticLexicon:
    n_concepts: int = 12
    n_fillers: int = 26

    def concept(self, c, positive):
        return f"k{c:02d}{'p' if positive else 'n'}"

    def filler(self, i):
        return f"f{i:02d}"

    @property
    def tokens(self):
        toks = [self.concept(c, pol) for c in range(self.n_concepts) for pol in (True, False)]
        return toks + [self.filler(i) for i in range(self.n_fillers)]


def make_word_vectors(lexicon: SyntheticLexicon, dim=300, seed=0):
    """Random unit-scale vectors for every lexicon token: (tokens, matrix)."""
    rng = np.random.default_rng(seed)
    toks = lexicon.tokens
    mat = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(len(toks), dim)) * np.sqrt(dim) / 4
    return toks, np.round(mat, 6)


def _fillers(rng, lex, k):
    return [lex.filler(int(i)) for i in rng.integers(0, lex.n_fillers, size=k)]


def make_nli_corpus(n_pairs=2000, lexicon=None, seed=0, premise_concepts=3, premise_fillers=2):
    """Balanced, shuffled list of :class:`NliExample`."""
    lex = lexicon or SyntheticLexicon()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_pairs):
        label = LABELS[i % 3]
        concepts = rng.choice(lex.n_concepts, size=premise_concepts, replace=False)
        pol = rng.integers(0, 2, size=premise_concepts).astype(bool)
        premise = [lex.concept(c, p) for c, p in zip(concepts, pol)] + _fillers(rng, lex, premise_fillers)
        rng.shuffle(premise)

        k = int(rng.integers(1, 3))
        pick = rng.choice(premise_concepts, size=k, replace=False)
        hyp = [lex.concept(concepts[j], pol[j]) for j in pick]
        if label == "contradiction":
            j = pick[0]
            hyp[0] = lex.concept(concepts[j], not pol[j])
        elif label == "neutral":
            absent = [c for c in range(lex.n_concepts) if c not in set(concepts.tolist())]
            c = int(rng.choice(absent))
            hyp[0] = lex.concept(c, bool(rng.integers(0, 2)))
        hyp += _fillers(rng, lex, int(rng.integers(1, 3)))
        rng.shuffle(hyp)
        out.append(NliExample(tuple(premise), tuple(hyp), label))
    perm = rng.permutation(len(out))
    return [out[i] for i in perm]


def make_concept_task(n=600, lexicon=None, seed=0, n_fillers=(3, 5), target="concept"):
    """Single-sentence classification: one concept token among fillers.

    ``target="concept"`` labels by concept id, ``"polarity"`` by surface form.
    Returns (sentences, labels) with labels as strings.
    """
    lex = lexicon or SyntheticLexicon()
    rng = np.random.default_rng(seed)
    sents, labels = [], []
    for _ in range(n):
        c = int(rng.integers(0, lex.n_concepts))
        pol = bool(rng.integers(0, 2))
        toks = [lex.concept(c, pol)] + _fillers(rng, lex, int(rng.integers(n_fillers[0], n_fillers[1] + 1)))
        rng.shuffle(toks)
        sents.append(toks)
        labels.append(f"c{c:02d}" if target == "concept" else ("pos" if pol else "neg"))
    return sents, labels


def make_relatedness_task(n=400, dim=8, seed=0, noise=0.0):
    """Vector pairs whose gold score in [1, 5] is a linear function of their
    matching features.  Returns (u, v, scores)."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, dim))
    v = u + rng.normal(scale=1.0, size=(n, dim))
    w = rng.normal(size=dim)
    raw = np.abs(u - v) @ np.abs(w) + (u * v) @ (0.2 * w)
    raw = raw + noise * rng.normal(size=n)
    lo, hi = raw.min(), raw.max()
    scores = 1.0 + 4.0 * (raw - lo) / (hi - lo)
    return u, v, scores


def make_retrieval_corpus(n_images=20, captions_per_image=5, dim=16, seed=0, caption_noise=0.0):
    """Image features and caption vectors; with zero noise every caption
    vector equals its image vector.  Returns (images, captions, caption_image)."""
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n_images, dim))
    owner = np.repeat(np.arange(n_images), captions_per_image)
    captions = images[owner] + caption_noise * rng.normal(size=(len(owner), dim))
    return images, captions, owner


def _content(tokens):
    return {t for t in tokens if t.startswith("k")}


def _jaccard(a, b):
    a, b = _content(a), _content(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def make_retrieval_fixture(n_images=40, captions_per_image=5, feat_dim=24, lexicon=None, seed=0, noise=0.1):
    """Images described by two concept tokens each.

    Returns (image_ids, features, captions) where captions is a list of
    (image_id, token list).
    """
    lex = lexicon or SyntheticLexicon()
    rng = np.random.default_rng(seed)
    basis = {t: rng.normal(size=feat_dim) for t in lex.tokens if t.startswith("k")}
    ids, feats, caps = [], [], []
    for i in range(n_images):
        concepts = rng.choice(lex.n_concepts, size=2, replace=False)
        toks = [lex.concept(int(c), bool(rng.integers(0, 2))) for c in concepts]
        iid = f"img{i:03d}"
        ids.append(iid)
        feats.append(sum(basis[t] for t in toks) + noise * rng.normal(size=feat_dim))
        for _ in range(captions_per_image):
            words = toks + _fillers(rng, lex, int(rng.integers(1, 4)))
            rng.shuffle(words)
            caps.append((iid, words))
    return ids, np.round(np.array(feats), 6), caps


def write_fixture_suite(out_dir, seed=0, embed_dim=300, n_pairs=2000):
    """Write vectors, NLI splits, transfer tasks and retrieval files plus a
    matching ``config.yaml`` into ``out_dir``.  Returns the config dict."""
    out = Path(out_dir)
    (out / "tasks").mkdir(parents=True, exist_ok=True)
    lex = SyntheticLexicon()
    toks, mat = make_word_vectors(lex, dim=embed_dim, seed=seed)
    write_word_vectors(out / "vectors.txt", toks, mat)

    corpus = make_nli_corpus(n_pairs, lex, seed=seed)
    n_tr, n_dv = int(0.8 * n_pairs), int(0.1 * n_pairs)
    write_nli_file(out / "nli.train.tsv", corpus[:n_tr])
    write_nli_file(out / "nli.dev.tsv", corpus[n_tr : n_tr + n_dv])
    write_nli_file(out / "nli.test.tsv", corpus[n_tr + n_dv :])

    def write_rows(name, rows):
        with open(out / "tasks" / name, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write("\t".join(r) + "\n")

    for target in ("concept", "polarity"):
        sents, labels = make_concept_task(600, lex, seed=seed + 100, target=target)
        write_rows(f"{target}.cls.tsv", [(lab, " ".join(s)) for s, lab in zip(sents, labels)])
    pairs = make_nli_corpus(600, lex, seed=seed + 200)
    write_rows("entail.pair.tsv", [(e.label, " ".join(e.premise), " ".join(e.hypothesis)) for e in pairs])
    rel = make_nli_corpus(600, lex, seed=seed + 300)
    write_rows(
        "related.rel.tsv",
        [(f"{1 + 4 * _jaccard(e.premise, e.hypothesis):.4f}", " ".join(e.premise), " ".join(e.hypothesis)) for e in rel],
    )
    write_rows(
        "similar.sts.tsv",
        [(f"{5 * _jaccard(e.premise, e.hypothesis):.4f}", " ".join(e.premise), " ".join(e.hypothesis)) for e in rel[:300]],
    )

    ids, feats, caps = make_retrieval_fixture(n_images=100, lexicon=lex, seed=seed + 400)
    write_image_features(out / "images.txt", ids, feats)
    with open(out / "captions.tsv", "w", encoding="utf-8") as fh:
        for iid, words in caps:
            fh.write(f"{iid}\t{' '.join(words)}\n")

    config = {
        "seed": seed,
        "encoder": {"kind": "BILSTM_MAX", "dim": 32},
        "schedule": {"max_epochs": 20},
        "retrieval": {"contrastive": 5, "folds": 2, "epochs": 30},
        "paths": {
            "vectors": str(out / "vectors.txt"),
            "nli_train": str(out / "nli.train.tsv"),
            "nli_dev": str(out / "nli.dev.tsv"),
            "nli_test": str(out / "nli.test.tsv"),
            "tasks": str(out / "tasks"),
            "images": str(out / "images.txt"),
            "captions": str(out / "captions.tsv"),
        },
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    return config
