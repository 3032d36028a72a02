"""On-disk layout of a trained run and dataset resolution for the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .data import DataError, Dataset, annotate_missing, load_dataset, load_jsonl
from .model import TextClassifier
from .training import Checkpoint, TrainResult

MODEL_FILE = "model.json"
FINAL_FILE = "final.ckpt"
HISTORY_FILE = "history.json"
CONFIG_FILE = "config.json"
BUNDLED = {"mams_sample": "mams_sample.jsonl", "synthetic": "synthetic_default"}


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise DataError(f"unknown bundled dataset {name!r}; choose from {', '.join(BUNDLED)}")
    return Path(str(resources.files("spaninfluence") / "data" / BUNDLED[name]))


def resolve_dataset(spec: str, *, annotate: bool = False, num_classes: int | None = None) -> Dataset:
    """Load ``spec``: a split directory, a JSONL file with per-record splits,
    or ``bundled:<name>``."""
    path = bundled_path(spec.split(":", 1)[1]) if spec.startswith("bundled:") else Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    ds = load_dataset(path) if path.is_dir() else load_jsonl(path, num_classes=num_classes)
    return annotate_missing(ds) if annotate else ds


@dataclass
class Run:
    model: TextClassifier
    final: Checkpoint
    epochs: list[Checkpoint]
    history: list[dict]
    config: dict

    def as_train_result(self) -> TrainResult:
        return TrainResult(self.final, self.epochs, self.history, self.final.provenance.get("dev_acc", float("nan")))


def save_run(directory, model: TextClassifier, result: TrainResult, config: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    model.save(d / MODEL_FILE)
    result.final.save(d / FINAL_FILE)
    for old in d.glob("epoch-*.ckpt"):
        old.unlink()
    for c in result.epochs:
        c.save(d / f"epoch-{c.epoch:04d}.ckpt")
    (d / HISTORY_FILE).write_text(json.dumps(result.history, indent=1, sort_keys=True) + "\n")
    (d / CONFIG_FILE).write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")
    return d


def load_run(directory) -> Run:
    d = Path(directory)
    if not (d / FINAL_FILE).exists():
        raise FileNotFoundError(f"no trained run in {d} (missing {FINAL_FILE})")
    model = TextClassifier.load(d / MODEL_FILE)
    final = Checkpoint.load(d / FINAL_FILE)
    epochs = sorted((Checkpoint.load(p) for p in d.glob("epoch-*.ckpt")), key=lambda c: c.step)
    history = json.loads((d / HISTORY_FILE).read_text()) if (d / HISTORY_FILE).exists() else []
    config = json.loads((d / CONFIG_FILE).read_text()) if (d / CONFIG_FILE).exists() else {}
    return Run(model, final, epochs, history, config)
