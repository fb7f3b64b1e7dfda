"""Manifest TSV and JSON-lines helpers."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..exceptions import FormatError

SPLITS = ("train", "dev", "test")
_FIELDS = ("utt_id", "path", "split")


@dataclass
class ManifestRow:
    utt_id: str
    path: str
    split: str = "train"


@dataclass
class Manifest:
    rows: list
    base_dir: Path | None = field(default=None, repr=False)

    def __post_init__(self):
        ids = [r.utt_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest utt_id values must be unique")
        bad = [r.split for r in self.rows if r.split not in SPLITS]
        if bad:
            raise FormatError(f"unknown split {bad[0]!r}")

    def __len__(self):
        return len(self.rows)

    def split(self, name: str) -> list:
        return [r for r in self.rows if r.split == name]

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p

    def save(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(_FIELDS)
            for r in self.rows:
                w.writerow([r.utt_id, r.path, r.split])

    @classmethod
    def load(cls, path, check_files: bool = True) -> "Manifest":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh, delimiter="\t")
            if tuple(reader.fieldnames or ()) != _FIELDS:
                raise FormatError(f"manifest header must be {list(_FIELDS)}")
            rows = [ManifestRow(d["utt_id"], d["path"], d["split"]) for d in reader]
        m = cls(rows, path.parent)
        if check_files:
            missing = [r.utt_id for r in rows if not m.resolve(r).exists()]
            if missing:
                raise FormatError(f"{len(missing)} manifest files missing, e.g. {missing[0]}")
        return m


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{n}: {exc}") from exc
    return out
