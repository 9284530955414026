"""CoNLL-style reader and writer for chunk corpora.

The data file holds one ``TOKEN TAG`` line per token and a blank line
between sentences, UTF-8, with a final newline.  Token and tag indices
live in a JSON sidecar next to it (``<path>.vocab.json``) so that a
round trip reproduces feature indices exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

from .chain import ChainInstance
from .model import FeatureVector
from .synthdata import ChunkCorpus

SIDECAR_VERSION = 1


class ConllFormatError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.line = line


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".vocab.json")


def _check_symbols(kind: str, symbols) -> list[str]:
    symbols = [str(s) for s in symbols]
    for s in symbols:
        if not s or any(c.isspace() for c in s):
            raise ValueError(f"{kind} {s!r} is empty or contains whitespace")
    if len(set(symbols)) != len(symbols):
        raise ValueError(f"duplicate {kind} entries")
    return symbols


def write_conll(corpus: ChunkCorpus, path) -> None:
    path = Path(path)
    vocab = _check_symbols("token", corpus.vocabulary)
    tags = _check_symbols("tag", corpus.tags)
    blocks = []
    for inst in corpus.instances:
        lines = []
        for f, t in zip(inst.observations, inst.gold_tags):
            if len(f.entries) != 1 or next(iter(f.entries.values())) != 1.0:
                raise ValueError("every observation must be a single vocabulary indicator")
            lines.append(f"{vocab[next(iter(f.entries))]} {tags[t]}\n")
        blocks.append("".join(lines))
    path.write_text("\n".join(blocks), encoding="utf-8", newline="\n")
    meta = {"version": SIDECAR_VERSION, "tags": tags, "vocabulary": vocab}
    sidecar_path(path).write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8", newline="\n")


def _read_sidecar(path: Path) -> tuple[list[str], list[str]]:
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConllFormatError(side, None, "vocabulary sidecar missing") from None
    except json.JSONDecodeError as exc:
        raise ConllFormatError(side, exc.lineno, f"invalid JSON: {exc.msg}") from None
    if not isinstance(meta, dict) or meta.get("version") != SIDECAR_VERSION:
        raise ConllFormatError(side, None, f"unsupported sidecar version {meta.get('version') if isinstance(meta, dict) else None!r}")
    try:
        return _check_symbols("token", meta["vocabulary"]), _check_symbols("tag", meta["tags"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConllFormatError(side, None, f"bad sidecar: {exc}") from None


def read_conll(path) -> ChunkCorpus:
    """Inverse of :func:`write_conll`; errors name the offending line."""
    path = Path(path)
    text = path.read_bytes().decode("utf-8")
    if not text:
        if sidecar_path(path).exists():
            vocab, tags = _read_sidecar(path)
            return ChunkCorpus([], vocab, tags)
        return ChunkCorpus([], [], [])
    lines = text.split("\n")
    if lines[-1] != "":
        raise ConllFormatError(path, len(lines), "missing final newline")
    lines.pop()
    vocab, tags = _read_sidecar(path)
    token_index = {w: i for i, w in enumerate(vocab)}
    tag_index = {t: i for i, t in enumerate(tags)}
    n = len(vocab)

    instances = []
    words: list[int] = []
    seq: list[int] = []

    def close():
        if words:
            obs = tuple(FeatureVector({w: 1.0}, n) for w in words)
            instances.append(ChainInstance(obs, tuple(seq)))
            words.clear()
            seq.clear()

    for number, line in enumerate(lines, start=1):
        line = line.rstrip("\r")
        if not line.strip():
            if not words:
                raise ConllFormatError(path, number, "empty sentence")
            close()
            continue
        cols = line.split()
        if len(cols) != 2:
            raise ConllFormatError(path, number, f"expected 2 columns (TOKEN TAG), found {len(cols)}")
        token, tag = cols
        if token not in token_index:
            raise ConllFormatError(path, number, f"unknown token {token!r}")
        if tag not in tag_index:
            raise ConllFormatError(path, number, f"unknown tag {tag!r}")
        words.append(token_index[token])
        seq.append(tag_index[tag])
    close()
    return ChunkCorpus(instances, vocab, tags)
