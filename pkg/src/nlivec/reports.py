"""JSON + aligned TSV report writing with a provenance block."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def provenance(config, seed):
    return {"seed": seed, "config_hash": config_hash(config), "version": __version__}


def dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=_default) + "\n"


def _default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def format_cell(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def aligned_tsv(header, rows):
    """Tab-separated text whose columns are space-padded to a common width."""
    table = [list(map(str, header))] + [[format_cell(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["\t".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    return "\n".join(lines) + "\n"


def read_aligned_tsv(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    split = [[c.strip() for c in ln.split("\t")] for ln in lines]
    return split[0], split[1:]


class ReportWriter:
    """Funnels every file a command produces through one place."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.written: list[Path] = []

    def _path(self, name):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / name
        self.written.append(p)
        return p

    def json(self, name, obj):
        p = self._path(name)
        p.write_text(dumps(obj), encoding="utf-8")
        return p

    def tsv(self, name, header, rows):
        p = self._path(name)
        p.write_text(aligned_tsv(header, rows), encoding="utf-8")
        return p

    def path(self, name):
        return self._path(name)
