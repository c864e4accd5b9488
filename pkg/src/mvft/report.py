"""Run reports: UTF-8 JSON with sorted keys, validated against a fixed schema on read.

Top-level keys (required unless noted):

``schema_version``  integer, currently 1
``command``         "train", "eval" or "ablate"
``command_line``    argv list that reproduces the run (resolved config as flags)
``config``          resolved training config
``dataset``         ``{"path", "sha256", "n_windows", "label_names"}``
``split``           ``{"policy", "seed", "ratios", "sizes"}``
``metrics``         split name -> ``{"accuracy", "loss", "confusion", "precision", "recall"}``
``history``         optional; list of ``{"epoch", "train_loss", "val_accuracy", "val_loss"}``
``ablation``        optional; list of ``{"model", "views", "status", "test_accuracy", ...}``
``wall_clock_seconds``  float; the only field that varies between identical runs
"""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

SCHEMA_VERSION = 1

_METRICS = {
    "type": "object",
    "required": ["accuracy", "loss", "confusion", "precision", "recall"],
    "properties": {
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "loss": {"type": "number"},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
        "precision": {"type": "array", "items": {"type": "number"}},
        "recall": {"type": "array", "items": {"type": "number"}},
    },
}

SCHEMA = {
    "type": "object",
    "required": ["schema_version", "command", "command_line", "config", "dataset", "split", "metrics",
                 "wall_clock_seconds"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "command": {"enum": ["train", "eval", "ablate"]},
        "command_line": {"type": "array", "items": {"type": "string"}},
        "config": {"type": "object"},
        "dataset": {
            "type": "object",
            "required": ["path", "sha256", "n_windows", "label_names"],
            "properties": {
                "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                "n_windows": {"type": "integer", "minimum": 0},
                "label_names": {"type": "array", "items": {"type": "string"}},
            },
        },
        "split": {
            "type": "object",
            "required": ["policy", "seed", "ratios", "sizes"],
        },
        "metrics": {"type": "object", "additionalProperties": _METRICS},
        "history": {
            "type": "array",
            "items": {"type": "object", "required": ["epoch", "train_loss", "val_accuracy"]},
        },
        "ablation": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["model", "views", "status", "test_accuracy"],
                "properties": {
                    "model": {"enum": ["baseline", "mvft"]},
                    "status": {"enum": ["ok", "failed"]},
                    "test_accuracy": {"type": ["number", "null"]},
                },
            },
        },
        "wall_clock_seconds": {"type": "number", "minimum": 0},
    },
}


class ReportSchemaError(ValueError):
    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def validate_report(doc) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ReportSchemaError(err.message, where)


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_report(path, doc: dict) -> None:
    validate_report(doc)
    Path(path).write_text(dumps_report(doc), encoding="utf-8")


def read_report(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    validate_report(doc)
    return doc
