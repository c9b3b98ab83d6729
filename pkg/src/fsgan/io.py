"""Checkpoint and result persistence.

Every checkpoint is JSON carrying ``kind`` and ``format_version``. Floats go
through ``repr`` in JSON and ``%.17g`` in CSV, so values read back are
bit-identical to those written.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .ensemble import EnsembleDiscriminator, ensemble_from_dict
from .errors import CheckpointError
from .finetune import MultiHeadClassifier
from .gancore import GanConfig, TrainedGan

FLOAT_FMT = ".17g"


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), FLOAT_FMT)
    return str(value)


def write_text(path, text: str) -> Path:
    """Write through a temporary file so readers never see a half-written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def write_json(path, doc) -> Path:
    return write_text(path, json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} is corrupt or truncated: {exc}") from exc


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    os.replace(tmp, path)
    return path


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# single-file checkpoints


def save_checkpoint(obj, path) -> Path:
    """Save an ``MlpModel`` or ``MultiHeadClassifier`` as one JSON file."""
    if isinstance(obj, dc.MlpModel):
        doc = {"kind": "mlp", **dc.model_to_dict(obj)}
    elif isinstance(obj, MultiHeadClassifier):
        doc = {"kind": "classifier", **obj.to_dict()}
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    return write_json(path, doc)


def load_checkpoint(path):
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: checkpoint root must be an object")
    kind = doc.pop("kind", None)
    if kind == "mlp":
        return dc.model_from_dict(doc)
    if kind == "classifier":
        return MultiHeadClassifier.from_dict(doc)
    raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")


# ---------------------------------------------------------------------------
# trained GANs: a directory with a manifest, one file per network and the loss log


def save_gan(gan: TrainedGan, directory, ensemble: EnsembleDiscriminator | None = None) -> Path:
    """Write ``gan.json``, one checkpoint per network and ``losses.csv``.

    A fitted ensemble's combination weights and calibration are stored in the
    manifest under ``"ensemble"``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(gan.generator, directory / "generator.json")
    names = []
    for t, member in enumerate(gan.sub_discriminators):
        name = f"discriminator_{t}.json"
        save_checkpoint(member, directory / name)
        names.append(name)
    write_csv(directory / "losses.csv", ["step", "d_loss", "g_loss"], gan.loss_history)
    manifest = {
        "kind": "gan",
        "format_version": dc.FORMAT_VERSION,
        "config": gan.config.to_dict(),
        "generator": "generator.json",
        "discriminators": names,
        "bootstrap_indices": None if gan.bootstrap_indices is None else [idx.tolist() for idx in gan.bootstrap_indices],
        "losses": "losses.csv",
    }
    if ensemble is not None:
        manifest["ensemble"] = ensemble.to_dict()
    write_json(directory / "gan.json", manifest)
    return directory


def _read_losses(path: Path) -> list[tuple[int, float, float]]:
    try:
        with path.open(newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader)
            if header != ["step", "d_loss", "g_loss"]:
                raise CheckpointError(f"{path}: unexpected header {header}")
            return [(int(s), float(d), float(g)) for s, d, g in reader]
    except (OSError, StopIteration, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable loss log ({exc})") from exc


def load_gan(directory) -> TrainedGan:
    directory = Path(directory)
    doc = read_json(directory / "gan.json")
    if doc.get("kind") != "gan":
        raise CheckpointError(f"{directory}: not a GAN checkpoint")
    if doc.get("format_version") != dc.FORMAT_VERSION:
        raise CheckpointError(f"{directory}: unsupported format_version {doc.get('format_version')!r}")
    try:
        config = GanConfig(**doc["config"])
        generator = load_checkpoint(directory / doc["generator"])
        members = [load_checkpoint(directory / name) for name in doc["discriminators"]]
        boots = doc["bootstrap_indices"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{directory}: malformed GAN manifest ({exc})") from exc
    boots = None if boots is None else [np.asarray(b, dtype=int) for b in boots]
    history = _read_losses(directory / doc["losses"])
    return TrainedGan(generator, members, config, history, boots)


def load_ensemble(directory, gan: TrainedGan | None = None) -> EnsembleDiscriminator:
    """Rebuild the ensemble stored alongside a saved GAN."""
    directory = Path(directory)
    gan = gan or load_gan(directory)
    doc = read_json(directory / "gan.json")
    if "ensemble" not in doc:
        raise CheckpointError(f"{directory}: no fitted ensemble in gan.json")
    try:
        return ensemble_from_dict(gan.sub_discriminators, doc["ensemble"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{directory}: malformed ensemble section ({exc})") from exc


# ---------------------------------------------------------------------------
# sampler output


def save_samples(path, X, labels=None) -> Path:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    header = [f"x{i}" for i in range(X.shape[1])]
    if labels is None:
        return write_csv(path, header, X.tolist())
    labels = np.asarray(labels).reshape(-1)
    return write_csv(path, header + ["label"], [[*row, int(lab)] for row, lab in zip(X.tolist(), labels)])


def load_samples(path):
    path = Path(path)
    try:
        with path.open(newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader)
            rows = [[float(v) for v in r] for r in reader if r]
    except (OSError, StopIteration, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable sample file ({exc})") from exc
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    if header and header[-1] == "label":
        return arr[:, :-1], arr[:, -1].astype(int)
    return arr, None
