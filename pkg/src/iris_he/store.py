"""On-disk template database: a JSON index over IRISTPL and IRISCT files."""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from iris_he.cleartext_matching import TemplateRecord
from iris_he.encoding import IrisTemplate, load_template
from iris_he.errors import StoreError

INDEX_NAME = "index.json"
INDEX_VERSION = 1
EYES = ("L", "R")
_ID_PART = re.compile(r"^[A-Za-z0-9_.-]+$")


def make_id(subject: str, eye: str, sample: str) -> str:
    if eye not in EYES:
        raise StoreError(f"eye must be L or R, got {eye!r}")
    for part in (subject, sample):
        if not _ID_PART.match(part) or part in (".", ".."):
            raise StoreError(f"invalid id component {part!r}")
    return f"{subject}/{eye}/{sample}"


def split_id(tid: str) -> tuple[str, str, str]:
    parts = tid.split("/")
    if len(parts) != 3:
        raise StoreError(f"id must be subject/eye/sample, got {tid!r}")
    make_id(*parts)
    return parts[0], parts[1], parts[2]


@dataclass
class StoreEntry:
    template: str  # path relative to the store root
    ciphertexts: dict[str, str] = field(default_factory=dict)  # key name -> relative path


class TemplateStore:
    """Templates under `root`, indexed by `subject/eye/sample`.

    One writer at a time; readers only ever see a complete index because
    every save replaces the file atomically.
    """

    def __init__(self, root, entries: dict[str, StoreEntry] | None = None):
        self.root = Path(root)
        self.entries: dict[str, StoreEntry] = dict(entries or {})

    @property
    def index_path(self) -> Path:
        return self.root / INDEX_NAME

    @classmethod
    def open(cls, root, create: bool = False) -> "TemplateStore":
        root = Path(root)
        index = root / INDEX_NAME
        if not index.exists():
            if not create:
                raise StoreError(f"no template store at {root}")
            root.mkdir(parents=True, exist_ok=True)
            store = cls(root)
            store.save()
            return store
        try:
            doc = json.loads(index.read_text())
        except (OSError, ValueError) as exc:
            raise StoreError(f"unreadable index {index}: {exc}") from exc
        if doc.get("version") != INDEX_VERSION or not isinstance(doc.get("entries"), dict):
            raise StoreError(f"{index} is not a version {INDEX_VERSION} store index")
        entries = {}
        for tid, e in doc["entries"].items():
            split_id(tid)
            entries[tid] = StoreEntry(e["template"], dict(e.get("ciphertexts", {})))
        store = cls(root, entries)
        store.check()
        return store

    def check(self) -> None:
        """Every index entry must reference existing files."""
        for tid, e in self.entries.items():
            for rel in [e.template, *e.ciphertexts.values()]:
                if not (self.root / rel).is_file():
                    raise StoreError(f"{tid}: missing file {rel}")

    def save(self) -> None:
        doc = {
            "version": INDEX_VERSION,
            "entries": {
                tid: {"template": e.template, "ciphertexts": e.ciphertexts} for tid, e in sorted(self.entries.items())
            },
        }
        fd, tmp = tempfile.mkstemp(prefix=".index.", dir=self.root)
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(doc, fh, indent=1, sort_keys=True)
                fh.write("\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.index_path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, tid: str) -> bool:
        return tid in self.entries

    def ids(self) -> list[str]:
        return sorted(self.entries)

    def template_path(self, tid: str) -> Path:
        return self.root / self._entry(tid).template

    def ciphertext_path(self, tid: str, key_name: str) -> Path:
        e = self._entry(tid)
        if key_name not in e.ciphertexts:
            raise StoreError(f"{tid} has no ciphertext under key {key_name!r}")
        return self.root / e.ciphertexts[key_name]

    def _entry(self, tid: str) -> StoreEntry:
        try:
            return self.entries[tid]
        except KeyError:
            raise StoreError(f"unknown template id {tid!r}") from None

    def reserve(self, ids) -> None:
        """Fail before writing anything if any id is taken or repeated."""
        seen = set()
        for tid in ids:
            if tid in self.entries or tid in seen:
                raise StoreError(f"id collision: {tid}")
            seen.add(tid)

    def add(self, subject: str, eye: str, sample: str, template: IrisTemplate, save: bool = True) -> str:
        tid = make_id(subject, eye, sample)
        self.reserve([tid])
        rel = Path("templates", subject, eye, f"{sample}.tpl")
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(template.to_bytes())
        self.entries[tid] = StoreEntry(rel.as_posix())
        if save:
            self.save()
        return tid

    def ciphertext_slot(self, tid: str, key_name: str) -> Path:
        """Where the IRISCT file of `tid` under `key_name` lives; call attach() once written."""
        self._entry(tid)
        if not _ID_PART.match(key_name):
            raise StoreError(f"invalid key name {key_name!r}")
        subject, eye, sample = split_id(tid)
        path = self.root / "ciphertexts" / key_name / subject / eye / f"{sample}.ct"
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def attach(self, tid: str, key_name: str, path, save: bool = True) -> None:
        rel = Path(path).resolve().relative_to(self.root.resolve())
        self._entry(tid).ciphertexts[key_name] = rel.as_posix()
        if save:
            self.save()

    def load(self, tid: str) -> IrisTemplate:
        return load_template(self.template_path(tid))

    def records(self) -> list[TemplateRecord]:
        out = []
        for tid in self.ids():
            subject, eye, sample = split_id(tid)
            out.append(TemplateRecord(subject, eye, sample, self.load(tid)))
        return out
