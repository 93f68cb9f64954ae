"""Command-line entry point.

Subcommands::

    train-nli       train an encoder + classifier on NLI data
    eval-transfer   probe a trained encoder on a directory of tasks
    eval-retrieval  caption-image retrieval on top of a trained encoder
    sweep-dim       train + evaluate over several embedding sizes
    viz-pooling     max-pooling selection counts per token
    grad-check      finite-difference check of every model gradient
    make-fixtures   write a synthetic corpus suite and config

Settings come from defaults, then ``--config`` (YAML), then flags
(``--set section.key=value`` reaches any field).  Exit codes: 0 success,
1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import encoders as enc
from . import nli, retrieval, transfer
from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .embeddings import VectorFormatError, embed_many, load_word_vectors, open_text, tokenize
from .reports import ReportWriter, aligned_tsv, provenance

log = logging.getLogger("nlivec")

DEFAULTS = {
    "seed": 0,
    "lowercase": False,
    "out": None,
    "encoder": {"kind": "BILSTM_MAX", "dim": 4096},
    "schedule": {
        "lr": 0.1,
        "epoch_decay": 0.99,
        "batch": 64,
        "lr_floor": 1e-5,
        "shrink": 5.0,
        "max_epochs": 50,
        "hidden": 512,
        "max_grad_norm": 5.0,
        "loss_reduction": "sum",
    },
    "probe": {
        "l2_grid": [1e-4, 1e-3, 1e-2, 1e-1, 1.0],
        "batch": 64,
        "max_epochs": 100,
        "patience": 5,
        "lr": 0.05,
    },
    "retrieval": {
        "margin": 0.2,
        "contrastive": 30,
        "lr": 0.1,
        "epochs": 30,
        "batch": 128,
        "joint_dim": None,
        "folds": 5,
        "ks": [1, 5, 10],
    },
    "sweep": {"dims": [], "kinds": []},
    "paths": {
        "vectors": None,
        "nli_train": None,
        "nli_dev": None,
        "nli_test": None,
        "tasks": None,
        "checkpoint": None,
        "images": None,
        "captions": None,
        "image_splits": None,
    },
}

TASK_SUFFIXES = {"cls": "CLS", "pair": "PAIR_CLS", "rel": "RELATEDNESS", "sts": "STS_UNSUPERVISED"}


class ConfigError(ValueError):
    """Invalid configuration or missing input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _merge(base, override, where="config"):
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown {where} key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}.{key} must be a mapping")
            _merge(base[key], val, f"{where}.{key}")
        else:
            base[key] = val
    return base


def _set_dotted(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config section {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def load_config(args):
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, data)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_dotted(cfg, key, yaml.safe_load(raw))
    for dotted, attr in FLAG_MAP:
        val = getattr(args, attr, None)
        if val is not None:
            _set_dotted(cfg, dotted, val)
    return cfg


FLAG_MAP = [
    ("seed", "seed"),
    ("out", "out"),
    ("encoder.kind", "kind"),
    ("encoder.dim", "dim"),
    ("schedule.max_epochs", "max_epochs"),
    ("paths.vectors", "vectors"),
    ("paths.nli_train", "train"),
    ("paths.nli_dev", "dev"),
    ("paths.nli_test", "test"),
    ("paths.tasks", "tasks"),
    ("paths.checkpoint", "checkpoint"),
    ("paths.images", "images"),
    ("paths.captions", "captions"),
    ("paths.image_splits", "image_splits"),
]


def _require_file(cfg, key):
    val = cfg["paths"].get(key)
    if not val:
        raise ConfigError(f"missing required path: paths.{key}")
    if not Path(val).exists():
        raise ConfigError(f"paths.{key}: file not found: {val}")
    return Path(val)


def _public(cfg):
    """Config as recorded in reports: the output directory is left out so
    reruns into different directories stay byte-identical."""
    return {k: v for k, v in cfg.items() if k != "out"}


def _require_out(cfg):
    if not cfg["out"]:
        raise ConfigError("an output directory is required (--out)")
    return Path(cfg["out"])


def _encoder_config(cfg, embed_dim=1, kind=None, dim=None):
    try:
        return enc.EncoderConfig(
            kind=(kind or cfg["encoder"]["kind"]).upper(),
            embed_dim=embed_dim,
            output_dim=int(dim or cfg["encoder"]["dim"]),
            seed=int(cfg["seed"]),
        )
    except enc.EncoderError as exc:
        raise ConfigError(str(exc)) from None


def _schedule(cfg):
    s = cfg["schedule"]
    try:
        return nli.Schedule(
            lr=float(s["lr"]),
            epoch_decay=float(s["epoch_decay"]),
            shrink=float(s["shrink"]),
            lr_floor=float(s["lr_floor"]),
            batch_size=int(s["batch"]),
            max_epochs=int(s["max_epochs"]),
            hidden=int(s["hidden"]),
            max_grad_norm=None if s["max_grad_norm"] in (None, 0) else float(s["max_grad_norm"]),
            loss_reduction=s["loss_reduction"],
            seed=int(cfg["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"schedule: {exc}") from None


def _probe_config(cfg):
    p = cfg["probe"]
    try:
        return transfer.ProbeConfig(
            l2_grid=tuple(p["l2_grid"]),
            batch_size=int(p["batch"]),
            max_epochs=int(p["max_epochs"]),
            patience=int(p["patience"]),
            lr=float(p["lr"]),
            seed=int(cfg["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"probe: {exc}") from None


def _retrieval_config(cfg):
    r = cfg["retrieval"]
    try:
        return retrieval.RetrievalConfig(
            margin=float(r["margin"]),
            n_contrastive=int(r["contrastive"]),
            joint_dim=None if r["joint_dim"] is None else int(r["joint_dim"]),
            lr=float(r["lr"]),
            epochs=int(r["epochs"]),
            batch_size=int(r["batch"]),
            seed=int(cfg["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"retrieval: {exc}") from None


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------


def _load_vectors(path, tokens, lowercase=False):
    vocab, table = load_word_vectors(path, restrict_to=set(tokens))
    log.info("loaded %d vectors of dim %d from %s", len(vocab), table.dim, path)
    return vocab, table


def _vector_dim(path):
    with open_text(path) as fh:
        for line in fh:
            fields = line.rstrip().split(" ")
            if len(fields) == 2 and all(f.isdigit() for f in fields):
                return int(fields[1])
            if len(fields) > 1:
                return len(fields) - 1
    raise ConfigError(f"{path}: no word vectors found")


def _load_encoder(path):
    ckpt = load_checkpoint(path)
    ec = ckpt.config.get("encoder")
    if ec is None:
        raise CheckpointError(f"{path}: no encoder config")
    config = enc.EncoderConfig(**ec)
    params = {k[len("encoder."):]: nx.Tensor(v) for k, v in ckpt.tensors.items() if k.startswith("encoder.")}
    clf = {k[len("classifier."):]: nx.Tensor(v) for k, v in ckpt.tensors.items() if k.startswith("classifier.")}
    expected = enc.init_params(config)
    if set(expected) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match a {config.kind} encoder")
    return enc.SentenceEncoder(config, params), clf, ckpt


def _nli_splits(cfg):
    lower = bool(cfg["lowercase"])
    train = nli.read_nli_file(_require_file(cfg, "nli_train"), lower)
    dev = nli.read_nli_file(_require_file(cfg, "nli_dev"), lower)
    test = nli.read_nli_file(cfg["paths"]["nli_test"], lower) if cfg["paths"]["nli_test"] else None
    if not train or not dev:
        raise ConfigError("NLI train and dev splits must be non-empty")
    return train, dev, test


def _train(cfg, kind=None, dim=None):
    """Shared by train-nli and sweep-dim."""
    vec_path = _require_file(cfg, "vectors")
    train, dev, test = _nli_splits(cfg)
    tokens = {t for ex in train + dev + (test or []) for t in ex.premise + ex.hypothesis}
    vocab, table = _load_vectors(vec_path, tokens)
    econf = _encoder_config(cfg, table.dim, kind, dim)
    prep = lambda exs: nli.prepare_pairs(exs, vocab, table)  # noqa: E731
    result = nli.train_nli(prep(train), prep(dev), econf, _schedule(cfg))
    dev_acc = nli.evaluate_nli(result.encoder, result.classifier, prep(dev))
    test_acc = nli.evaluate_nli(result.encoder, result.classifier, prep(test)) if test else None
    return result, econf, dev_acc, test_acc


# ---------------------------------------------------------------------------
# Transfer tasks
# ---------------------------------------------------------------------------


class TaskFormatError(ValueError):
    pass


def discover_tasks(task_dir):
    """Map task name -> (kind suffix, {split: path}) for ``NAME.KIND[.SPLIT].tsv``."""
    found = {}
    for path in sorted(Path(task_dir).glob("*.tsv")):
        parts = path.name[: -len(".tsv")].split(".")
        if len(parts) == 2 and parts[1] in TASK_SUFFIXES:
            name, suffix, split = parts[0], parts[1], "all"
        elif len(parts) == 3 and parts[1] in TASK_SUFFIXES and parts[2] in ("train", "dev", "test"):
            name, suffix, split = parts
        else:
            log.warning("ignoring %s: expected NAME.{cls,pair,rel,sts}[.train|.dev|.test].tsv", path.name)
            continue
        found.setdefault(name, (suffix, {}))[1][split] = path
    return found


def read_task_rows(path, suffix, lowercase=False):
    n_cols = 2 if suffix == "cls" else 3
    rows = []
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != n_cols:
                raise TaskFormatError(f"{path}:{lineno}: expected {n_cols} tab-separated columns")
            label = parts[0].strip()
            sents = [tokenize(s, lowercase) for s in parts[1:]]
            if any(not s for s in sents):
                raise TaskFormatError(f"{path}:{lineno}: empty sentence")
            if suffix in ("rel", "sts"):
                try:
                    score = float(label)
                except ValueError:
                    raise TaskFormatError(f"{path}:{lineno}: score {label!r} is not a number") from None
                lo, hi = (1.0, 5.0) if suffix == "rel" else (0.0, 5.0)
                if not lo <= score <= hi:
                    raise TaskFormatError(f"{path}:{lineno}: score {score} outside [{lo:g}, {hi:g}]")
                label = score
            rows.append((label, *sents))
    if not rows:
        raise TaskFormatError(f"{path}: no examples")
    return rows


def _load_task(name, suffix, files, lowercase, seed):
    notes = []
    if "all" in files:
        rows = read_task_rows(files["all"], suffix, lowercase)
        if suffix == "sts":
            split = (np.array([], int), np.array([], int), np.arange(len(rows)))
        else:
            split = transfer.seeded_split(len(rows), seed)
            notes.append(f"seeded 80/10/10 split (seed={seed})")
        return rows, split, notes
    rows, split = [], []
    needed = ("test",) if suffix == "sts" else ("train", "dev", "test")
    for part in needed:
        if part not in files:
            raise TaskFormatError(f"task {name}: missing {part} split file")
        part_rows = read_task_rows(files[part], suffix, lowercase)
        split.append(np.arange(len(rows), len(rows) + len(part_rows)))
        rows.extend(part_rows)
    if suffix == "sts":
        split = [np.array([], int), np.array([], int)] + split
    return rows, tuple(split), notes


def evaluate_suite(encoder, task_dir, cfg, vectors_path):
    """Run every task in ``task_dir``; returns (results, skipped)."""
    seed = int(cfg["seed"])
    lower = bool(cfg["lowercase"])
    tasks = discover_tasks(task_dir)
    loaded, skipped = {}, []
    for name, (suffix, files) in tasks.items():
        try:
            loaded[name] = (suffix, *_load_task(name, suffix, files, lower, seed))
        except TaskFormatError as exc:
            warnings.warn(f"skipping task {name}: {exc}")
            skipped.append({"task": name, "reason": str(exc)})
    if not loaded:
        return [], skipped

    tokens = {t for suffix, rows, _, _ in loaded.values() for r in rows for s in r[1:] for t in s}
    vocab, table = _load_vectors(vectors_path, tokens)
    if table.dim != encoder.config.embed_dim:
        raise ConfigError(
            f"word vectors have dim {table.dim}, encoder expects {encoder.config.embed_dim}"
        )
    probe_cfg = _probe_config(cfg)
    results = []
    for name in sorted(loaded):
        suffix, rows, split, notes = loaded[name]
        labels = [r[0] for r in rows]
        first = encoder.encode_many(embed_many([r[1] for r in rows], vocab, table))
        try:
            if suffix == "cls":
                res = transfer.eval_classification(name, first, labels, split, probe_cfg)
            else:
                second = encoder.encode_many(embed_many([r[2] for r in rows], vocab, table))
                if suffix == "pair":
                    res = transfer.eval_pair_task(name, first, second, labels, split, probe_cfg)
                elif suffix == "rel":
                    res = transfer.eval_sick_r(name, first, second, labels, split, probe_cfg)
                else:
                    res = transfer.eval_sts(name, first, second, labels)
        except (transfer.ProbeError, transfer.UndefinedCorrelation) as exc:
            warnings.warn(f"skipping task {name}: {exc}")
            skipped.append({"task": name, "reason": str(exc)})
            continue
        res.notes = notes + res.notes
        results.append(res)
    return results, skipped


def suite_summary(results):
    acc = [r for r in results if r.accuracy is not None]
    if not acc:
        return None, "no accuracy tasks: micro/macro aggregation omitted"
    micro, macro = transfer.aggregate(acc)
    return {"micro": micro, "macro": macro, "tasks": [r.name for r in acc]}, None


def _task_row(r):
    v = r.values
    if r.kind == "STS_UNSUPERVISED":
        return [r.name, r.kind, r.metric, "-", f"{v['pearson']:.3f}/{v['spearman']:.3f}", 0, r.test_count]
    if r.kind == "RELATEDNESS":
        return [r.name, r.kind, r.metric, f"{v['dev_pearson']:.3f}", f"{v['test_pearson']:.3f}", r.dev_count, r.test_count]
    if "test_f1" in v:
        return [
            r.name, r.kind, r.metric,
            f"{100 * v['dev_acc']:.1f}/{100 * v['dev_f1']:.1f}",
            f"{100 * v['test_acc']:.1f}/{100 * v['test_f1']:.1f}",
            r.dev_count, r.test_count,
        ]
    return [r.name, r.kind, r.metric, f"{100 * v['dev_acc']:.1f}", f"{100 * v['test_acc']:.1f}", r.dev_count, r.test_count]


TASK_HEADER = ["task", "kind", "metric", "dev", "test", "n_dev", "n_test"]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train_nli(cfg):
    out = _require_out(cfg)
    _require_file(cfg, "vectors")
    _nli_splits(cfg)
    _encoder_config(cfg)
    _schedule(cfg)

    result, econf, dev_acc, test_acc = _train(cfg)
    writer = ReportWriter(out)
    tensors = {f"encoder.{k}": v.data for k, v in result.encoder.params.items()}
    tensors.update({f"classifier.{k}": v.data for k, v in result.classifier.items()})
    ckpt_path = writer.path("checkpoint.nlv")
    save_checkpoint(
        ckpt_path,
        {"encoder": econf.to_dict(), "schedule": cfg["schedule"]},
        tensors,
        {"best_epoch": result.best_epoch},
    )
    history = nli.history_rows(result.history)
    report = {
        "command": "train-nli",
        "provenance": provenance(_public(cfg), cfg["seed"]),
        "config": _public(cfg),
        "encoder": econf.to_dict(),
        "best_epoch": result.best_epoch,
        "epochs_run": len(history),
        "nli": {"dev_acc": dev_acc, "test_acc": test_acc},
        "history": history,
        "checkpoint": ckpt_path.name,
    }
    writer.json("report.json", report)
    writer.tsv(
        "history.tsv",
        ["epoch", "train_loss", "train_acc", "dev_acc", "lr"],
        [[h["epoch"], h["train_loss"], h["train_acc"], h["dev_acc"], f"{h['lr']:.6g}"] for h in history],
    )
    print(f"best epoch {result.best_epoch}: dev {dev_acc:.4f}" + (f" test {test_acc:.4f}" if test_acc is not None else ""))
    return 0


def cmd_eval_transfer(cfg):
    out = _require_out(cfg)
    ckpt = _require_file(cfg, "checkpoint")
    vec_path = _require_file(cfg, "vectors")
    task_dir = _require_file(cfg, "tasks")
    if not discover_tasks(task_dir):
        raise ConfigError(f"{task_dir}: no task files found")
    _probe_config(cfg)
    encoder, _, _ = _load_encoder(ckpt)
    encoder.freeze()

    results, skipped = evaluate_suite(encoder, task_dir, cfg, vec_path)
    if not results:
        print("error: every task was skipped", file=sys.stderr)
        return 1
    summary, note = suite_summary(results)
    report = {
        "command": "eval-transfer",
        "provenance": provenance(_public(cfg), cfg["seed"]),
        "config": _public(cfg),
        "encoder": encoder.config.to_dict(),
        "tasks": [r.to_dict() for r in results],
        "skipped": skipped,
        "aggregate": summary,
        "notes": [note] if note else ["probes use the dev split for both L2 selection and early stopping"],
    }
    writer = ReportWriter(out)
    writer.json("report.json", report)
    rows = [_task_row(r) for r in results]
    if summary:
        rows.append(["micro", "-", "accuracy", f"{100 * summary['micro']:.1f}", "-", "-", "-"])
        rows.append(["macro", "-", "accuracy", f"{100 * summary['macro']:.1f}", "-", "-", "-"])
    writer.tsv("report.tsv", TASK_HEADER, rows)
    print(aligned_tsv(TASK_HEADER, rows), end="")
    return 0


def _retrieval_data(cfg, encoder, vectors_path):
    ids, feats = retrieval.read_image_features(_require_file(cfg, "images"))
    caps = retrieval.read_captions(_require_file(cfg, "captions"))
    row = {iid: i for i, iid in enumerate(ids)}
    unknown = sorted({iid for iid, _ in caps if iid not in row})
    if unknown:
        raise ConfigError(f"captions reference unknown image ids: {unknown[:5]}")
    toks = [tokenize(c, bool(cfg["lowercase"])) for _, c in caps]
    vocab, table = _load_vectors(vectors_path, {t for s in toks for t in s})
    if table.dim != encoder.config.embed_dim:
        raise ConfigError(f"word vectors have dim {table.dim}, encoder expects {encoder.config.embed_dim}")
    cap_vecs = encoder.encode_many(embed_many(toks, vocab, table))
    owner = np.array([row[iid] for iid, _ in caps])
    return ids, feats, cap_vecs, owner


def _retrieval_split(cfg, ids):
    if cfg["paths"]["image_splits"]:
        assign = retrieval.read_split_assignment(_require_file(cfg, "image_splits"))
        parts = {s: np.array([i for i, iid in enumerate(ids) if assign.get(iid) == s], int) for s in ("train", "val", "test")}
        return parts["train"], parts["val"], parts["test"], "from file"
    tr, dv, te = transfer.seeded_split(len(ids), int(cfg["seed"]))
    return np.sort(tr), np.sort(dv), np.sort(te), f"seeded 80/10/10 split (seed={cfg['seed']})"


def _subset(feats, cap_vecs, owner, image_rows):
    remap = {r: j for j, r in enumerate(image_rows)}
    keep = np.flatnonzero(np.isin(owner, image_rows))
    return feats[image_rows], cap_vecs[keep], np.array([remap[o] for o in owner[keep]])


def cmd_eval_retrieval(cfg):
    out = _require_out(cfg)
    ckpt = _require_file(cfg, "checkpoint")
    vec_path = _require_file(cfg, "vectors")
    _require_file(cfg, "images")
    _require_file(cfg, "captions")
    rconf = _retrieval_config(cfg)
    ks = tuple(int(k) for k in cfg["retrieval"]["ks"])
    folds = int(cfg["retrieval"]["folds"])
    encoder, _, _ = _load_encoder(ckpt)
    encoder.freeze()

    ids, feats, cap_vecs, owner = _retrieval_data(cfg, encoder, vec_path)
    tr, dv, te, split_note = _retrieval_split(cfg, ids)
    if len(tr) == 0 or len(dv) == 0 or len(te) == 0:
        raise ConfigError("retrieval needs non-empty train, val and test image sets")
    train = _subset(feats, cap_vecs, owner, tr)
    val = _subset(feats, cap_vecs, owner, dv)
    test = _subset(feats, cap_vecs, owner, te)
    if folds > len(te):
        raise ConfigError(f"cannot split {len(te)} test images into {folds} folds")
    smallest = len(te) // folds
    notes = [f"R@{k} dropped: folds hold only {smallest} images" for k in ks if k > smallest]
    ks = tuple(k for k in ks if k <= smallest)
    if not ks:
        raise ConfigError(f"every requested K exceeds the {smallest}-image folds")
    result = retrieval.train_retrieval(train, val, rconf)
    metrics = retrieval.evaluate_retrieval(result.projection, *test, Ks=ks, splits=folds, seed=int(cfg["seed"]))
    report = {
        "command": "eval-retrieval",
        "provenance": provenance(_public(cfg), cfg["seed"]),
        "config": _public(cfg),
        "split": {"train": len(tr), "val": len(dv), "test": len(te), "how": split_note},
        "best_epoch": result.best_epoch,
        "history": result.history,
        "metrics": metrics,
        "notes": notes,
    }
    writer = ReportWriter(out)
    writer.json("report.json", report)
    header = ["direction"] + [f"R@{k}" for k in ks] + ["MedR"]
    rows = [[d] + [metrics[d][f"R@{k}"] for k in ks] + [metrics[d]["MedR"]] for d in ("caption_retrieval", "image_retrieval")]
    writer.tsv("report.tsv", header, rows)
    print(aligned_tsv(header, rows), end="")
    return 0


def _parse_list(val, cast):
    if val is None:
        return []
    if isinstance(val, str):
        return [cast(v) for v in val.split(",") if v.strip()]
    return [cast(v) for v in val]


def cmd_sweep_dim(cfg):
    out = _require_out(cfg)
    dims = sorted(set(_parse_list(cfg["sweep"]["dims"], int)))
    kinds = [k.upper() for k in _parse_list(cfg["sweep"]["kinds"], str)] or [cfg["encoder"]["kind"].upper()]
    if not dims:
        raise ConfigError("sweep-dim needs at least one dimension (--dims)")
    for kind in kinds:
        for d in dims:
            _encoder_config(cfg, kind=kind, dim=d)
    vec_path = _require_file(cfg, "vectors")
    task_dir = _require_file(cfg, "tasks")
    _nli_splits(cfg)
    _schedule(cfg)
    _probe_config(cfg)

    rows, curve = [], []
    for kind in kinds:
        for d in dims:
            result, econf, dev_acc, test_acc = _train(cfg, kind, d)
            results, _ = evaluate_suite(result.encoder.freeze(), task_dir, cfg, vec_path)
            summary, _ = suite_summary(results)
            micro = summary["micro"] if summary else None
            macro = summary["macro"] if summary else None
            curve.append({"kind": kind, "dim": d, "nli_dev": dev_acc, "nli_test": test_acc, "micro": micro, "macro": macro})
            rows.append([kind, d, dev_acc, "-" if test_acc is None else test_acc, "-" if micro is None else micro, "-" if macro is None else macro])
            log.info("sweep %s dim %d: dev %.4f micro %s", kind, d, dev_acc, micro)
    writer = ReportWriter(out)
    writer.json("report.json", {"command": "sweep-dim", "provenance": provenance(_public(cfg), cfg["seed"]), "config": _public(cfg), "curve": curve})
    header = ["kind", "dim", "nli_dev", "nli_test", "micro", "macro"]
    writer.tsv("curve.tsv", header, rows)
    print(aligned_tsv(header, rows), end="")
    return 0


def pooling_histograms(encoder, sentences, vocab, table):
    """Per sentence, counts of how often each token's state wins the max."""
    out = []
    for toks in sentences:
        vec = encoder.encode(embed_many([toks], vocab, table)[0])
        out.append(enc.pool_selection_histogram(vec.argmax, len(toks)).tolist())
    return out


def cmd_viz_pooling(cfg, sentences):
    out = _require_out(cfg)
    ckpt = _require_file(cfg, "checkpoint")
    vec_path = _require_file(cfg, "vectors")
    if not sentences:
        raise ConfigError("viz-pooling needs at least one --sentence")
    toks = [tokenize(s, bool(cfg["lowercase"])) for s in sentences]
    if any(not t for t in toks):
        raise ConfigError("empty sentence")
    encoder, _, _ = _load_encoder(ckpt)
    if encoder.config.kind not in enc.MAX_POOL_KINDS:
        raise ConfigError(f"viz-pooling needs a max-pooling encoder, checkpoint holds {encoder.config.kind}")
    vocab, table = _load_vectors(vec_path, {t for s in toks for t in s})
    untrained = enc.SentenceEncoder(encoder.config)
    trained_h = pooling_histograms(encoder, toks, vocab, table)
    untrained_h = pooling_histograms(untrained, toks, vocab, table)
    rows, sents = [], []
    for i, s in enumerate(toks):
        for model, hist in (("trained", trained_h[i]), ("untrained", untrained_h[i])):
            for t, (tok, c) in enumerate(zip(s, hist)):
                rows.append([model, i, t, tok, c])
        a = np.array(trained_h[i]) / encoder.config.output_dim
        b = np.array(untrained_h[i]) / encoder.config.output_dim
        sents.append({
            "tokens": s,
            "trained": trained_h[i],
            "untrained": untrained_h[i],
            "total_variation": float(0.5 * np.abs(a - b).sum()),
        })
    writer = ReportWriter(out)
    writer.json("report.json", {
        "command": "viz-pooling",
        "provenance": provenance(_public(cfg), cfg["seed"]),
        "config": _public(cfg),
        "output_dim": encoder.config.output_dim,
        "sentences": sents,
    })
    header = ["model", "sentence", "position", "token", "count"]
    writer.tsv("pooling.tsv", header, rows)
    print(aligned_tsv(header, rows), end="")
    return 0


def gradient_report(seed=0, eps=1e-4):
    """Max relative gradient error for every encoder + classifier, and for
    the ranking loss, at toy sizes."""
    rng = np.random.default_rng(seed)
    rows = []
    embed, dim, hidden = 4, 8, 6
    sents = [rng.normal(size=(t, embed)) for t in (3, 5, 2, 4)]
    labels = np.array([0, 2, 1, 0])[: len(sents) // 2]
    x, lens = enc.pad_batch(sents)
    for kind in enc.KINDS:
        econf = enc.EncoderConfig(kind, embed_dim=embed, output_dim=dim, seed=seed)
        params = enc.init_params(econf)
        clf = nli.init_classifier(4 * dim, hidden, 3, seed=seed + 1)

        def loss_fn():
            v = enc.encode_batch(econf, params, x, lens)
            n = len(sents) // 2
            return nli.cross_entropy(nli.classifier_forward(nli.matching_features(v[:n], v[n:]), clf), labels)

        err = nx.grad_check(loss_fn, list(params.values()) + list(clf.values()), eps)
        rows.append((f"{kind}+classifier", err))
    images = rng.normal(size=(6, 5))
    caps = images + 0.3 * rng.normal(size=(6, 5))
    proj = retrieval.init_projection(5, 5, retrieval.RetrievalConfig(n_contrastive=3, seed=seed))
    cneg, ineg = retrieval.sample_negatives(np.arange(6), 3, np.random.default_rng(seed))
    err = nx.grad_check(lambda: retrieval.ranking_loss(caps, images, proj, cneg, ineg), proj.parameters(), eps)
    rows.append(("ranking_loss", err))
    return rows


def cmd_grad_check(cfg, tol):
    out = cfg["out"]
    rows = gradient_report(int(cfg["seed"]))
    ok = all(err < tol for _, err in rows)
    table = [[name, f"{err:.3e}", "pass" if err < tol else "FAIL"] for name, err in rows]
    if out:
        writer = ReportWriter(out)
        writer.json("report.json", {
            "command": "grad-check",
            "provenance": provenance(_public(cfg), cfg["seed"]),
            "tolerance": tol,
            "results": [{"component": n, "max_rel_err": e, "pass": e < tol} for n, e in rows],
        })
        writer.tsv("report.tsv", ["component", "max_rel_err", "status"], table)
    for r in table:
        print("\t".join(r))
    return 0 if ok else 1


def cmd_make_fixtures(cfg, embed_dim, n_pairs):
    from .synthetic import write_fixture_suite

    out = _require_out(cfg)
    write_fixture_suite(out, seed=int(cfg["seed"]), embed_dim=embed_dim, n_pairs=n_pairs)
    print(f"wrote fixture suite to {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="nlivec", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config field")
        return p

    p = common(sub.add_parser("train-nli", help="train an encoder on NLI data"))
    p.add_argument("--vectors")
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--kind")
    p.add_argument("--dim", type=int)
    p.add_argument("--max-epochs", type=int)

    p = common(sub.add_parser("eval-transfer", help="probe an encoder on transfer tasks"))
    p.add_argument("--checkpoint")
    p.add_argument("--vectors")
    p.add_argument("--tasks", help="directory of NAME.{cls,pair,rel,sts}.tsv files")

    p = common(sub.add_parser("eval-retrieval", help="caption-image retrieval"))
    p.add_argument("--checkpoint")
    p.add_argument("--vectors")
    p.add_argument("--images")
    p.add_argument("--captions")
    p.add_argument("--image-splits")

    p = common(sub.add_parser("sweep-dim", help="transfer performance against embedding size"))
    p.add_argument("--vectors")
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--tasks")
    p.add_argument("--kind")
    p.add_argument("--dims", help="comma-separated output dims")
    p.add_argument("--kinds", help="comma-separated encoder kinds")
    p.add_argument("--max-epochs", type=int)

    p = common(sub.add_parser("viz-pooling", help="max-pooling selection counts"))
    p.add_argument("--checkpoint")
    p.add_argument("--vectors")
    p.add_argument("--sentence", action="append", default=[])

    p = common(sub.add_parser("grad-check", help="finite-difference gradient check"))
    p.add_argument("--tol", type=float, default=1e-3)

    p = common(sub.add_parser("make-fixtures", help="write a synthetic data suite"))
    p.add_argument("--embed-dim", type=int, default=300)
    p.add_argument("--pairs", type=int, default=2000)
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg = load_config(args)
    if args.command == "sweep-dim":
        if args.dims:
            cfg["sweep"]["dims"] = args.dims
        if args.kinds:
            cfg["sweep"]["kinds"] = args.kinds
    if args.command == "train-nli":
        return cmd_train_nli(cfg)
    if args.command == "eval-transfer":
        return cmd_eval_transfer(cfg)
    if args.command == "eval-retrieval":
        return cmd_eval_retrieval(cfg)
    if args.command == "sweep-dim":
        return cmd_sweep_dim(cfg)
    if args.command == "viz-pooling":
        return cmd_viz_pooling(cfg, args.sentence)
    if args.command == "grad-check":
        return cmd_grad_check(cfg, args.tol)
    if args.command == "make-fixtures":
        return cmd_make_fixtures(cfg, args.embed_dim, args.pairs)
    raise ConfigError(f"unknown command {args.command}")


INPUT_ERRORS = (
    ConfigError,
    FileNotFoundError,
    VectorFormatError,
    nli.NliFormatError,
    CheckpointError,
    enc.EncoderError,
    retrieval.RetrievalError,
)


def main(argv=None):
    verbose = argv is not None and ("-v" in argv or "--verbose" in argv)
    if argv is None:
        verbose = "-v" in sys.argv[1:] or "--verbose" in sys.argv[1:]
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
