"""Plain-text model files.

Layout (format version 1), one field per line::

    hybridloss-model 1
    kind flat
    loss hybrid 0.5
    shape {"dimension": 505, "label_count": 5}
    config {...}
    fingerprint <sha256 of the training set>
    weights 505
    0 0.123...
    ...
    checksum <sha256 of every line above>
    end

Floats are written with ``repr`` so a reload gives the same bits.  A file
that is cut short misses the checksum or ``end`` line and is rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .chain import ChainInstance, ChainModel
from .losses import LossSpec
from .model import FlatDataset

MAGIC = "hybridloss-model"
FORMAT_VERSION = 1
KINDS = ("flat", "chain")


class ArtifactError(ValueError):
    pass


def _digest(parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode())
        h.update(b"\0")
    return h.hexdigest()


def flat_fingerprint(data: FlatDataset) -> str:
    phi = data.phi.tocsr().copy()
    phi.sort_indices()
    return _digest([
        "flat", data.label_count, data.dimension, phi.shape[0],
        phi.indptr.astype(np.int64).tobytes(), phi.indices.astype(np.int64).tobytes(),
        phi.data.astype(np.float64).tobytes(), data.gold.astype(np.int64).tobytes(),
        data.counts.astype(np.float64).tobytes()])


def chain_fingerprint(instances: Sequence[ChainInstance]) -> str:
    parts = ["chain", len(instances)]
    for inst in instances:
        parts.append(inst.dimension)
        parts.append(np.asarray(inst.gold_tags, dtype=np.int64).tobytes())
        for f in inst.observations:
            parts.append(repr(sorted(f.entries.items())))
    return _digest(parts)


def fingerprint(data) -> str:
    if isinstance(data, FlatDataset):
        return flat_fingerprint(data)
    return chain_fingerprint(list(data))


@dataclass
class ModelArtifact:
    weights: np.ndarray
    kind: str
    loss: LossSpec
    shape: dict
    config: dict = field(default_factory=dict)
    fingerprint: str = ""
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.kind not in KINDS:
            raise ArtifactError(f"unknown model kind {self.kind!r}")
        if self.kind == "flat":
            if self.shape.get("dimension") != len(self.weights):
                raise ArtifactError("flat weight count does not match dimension")
        else:
            n, t = self.shape.get("feature_count"), self.shape.get("tag_count")
            if not isinstance(n, int) or not isinstance(t, int) or (n + t + 2) * t != len(self.weights):
                raise ArtifactError("chain weight count does not match feature_count and tag_count")

    def chain_model(self) -> ChainModel:
        if self.kind != "chain":
            raise ArtifactError("not a chain model")
        return ChainModel.unpack(self.weights, self.shape["feature_count"], self.shape["tag_count"])

    def verify(self, training_data) -> None:
        """Raise unless ``training_data`` hashes to the stored fingerprint."""
        got = fingerprint(training_data)
        if got != self.fingerprint:
            raise ArtifactError(f"training-set fingerprint mismatch: file {self.fingerprint}, data {got}")


def _lines(model: ModelArtifact) -> list[str]:
    out = [
        f"{MAGIC} {model.version}",
        f"kind {model.kind}",
        f"loss {model.loss.kind} {model.loss.alpha!r}",
        "shape " + json.dumps(model.shape, sort_keys=True),
        "config " + json.dumps(model.config, sort_keys=True),
        f"fingerprint {model.fingerprint}",
        f"weights {len(model.weights)}",
    ]
    out += [f"{i} {float(v)!r}" for i, v in enumerate(model.weights)]
    return out


def save_model(model: ModelArtifact, path) -> None:
    body = _lines(model)
    text = "\n".join(body) + "\n"
    checksum = hashlib.sha256(text.encode()).hexdigest()
    Path(path).write_text(text + f"checksum {checksum}\nend\n", encoding="utf-8", newline="\n")


def _field(lines: list[str], i: int, key: str) -> str:
    if i >= len(lines):
        raise ArtifactError(f"truncated model file: missing {key!r} line")
    name, _, value = lines[i].partition(" ")
    if name != key:
        raise ArtifactError(f"line {i + 1}: expected {key!r}, found {name!r}")
    return value


def load_model(path, training_data=None) -> ModelArtifact:
    """Read a model file; with ``training_data`` also check its fingerprint.

    Nothing is returned unless the whole file parses and its checksum holds.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or not lines[0].startswith(MAGIC + " "):
        raise ArtifactError("not a model file")
    version = lines[0][len(MAGIC) + 1:]
    if version != str(FORMAT_VERSION):
        raise ArtifactError(f"unsupported version {version!r} (this reader handles {FORMAT_VERSION})")
    if lines[-1] != "" or len(lines) < 3 or lines[-2] != "end":
        raise ArtifactError("truncated model file: no end marker")
    checksum = _field(lines, len(lines) - 3, "checksum")
    body = "\n".join(lines[:-3]) + "\n"
    if hashlib.sha256(body.encode()).hexdigest() != checksum:
        raise ArtifactError("checksum mismatch: file is corrupt or truncated")
    try:
        kind = _field(lines, 1, "kind")
        loss_kind, alpha = _field(lines, 2, "loss").split()
        shape = json.loads(_field(lines, 3, "shape"))
        config = json.loads(_field(lines, 4, "config"))
        fp = _field(lines, 5, "fingerprint")
        count = int(_field(lines, 6, "weights"))
        rows = lines[7:-3]
        if len(rows) != count:
            raise ArtifactError(f"expected {count} weights, found {len(rows)}")
        weights = np.empty(count)
        for j, row in enumerate(rows):
            idx, value = row.split()
            if int(idx) != j:
                raise ArtifactError(f"line {j + 8}: weight index {idx} out of order")
            weights[j] = float(value)
        model = ModelArtifact(weights, kind, LossSpec(loss_kind, float(alpha)), shape, config, fp)
    except ArtifactError:
        raise
    except (ValueError, TypeError) as exc:
        raise ArtifactError(f"malformed model file: {exc}") from None
    if training_data is not None:
        model.verify(training_data)
    return model
