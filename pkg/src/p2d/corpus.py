"""Image corpus ingestion and dataset manifests.

A manifest is newline-delimited JSON: one header object followed by one object
per record and per match pair. Manifests are immutable once written; derived
datasets get a new manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from PIL import Image

from .errors import DuplicateEntry, EmptyCorpus, IncompatibleManifest, NotFound

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1

DOMAIN_TAGS = ("painting", "photo", "pseudo_real", "real_scene")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}


@dataclass(frozen=True)
class ImageRecord:
    """One image in a corpus. Paths are stored relative to the manifest root
    when ingested, absolute when pointing at generated artifacts."""

    id: str
    domain_tag: str
    path: str
    width: int
    height: int
    checksum: str

    def __post_init__(self) -> None:
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain_tag {self.domain_tag!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"record {self.id}: non-positive dimensions")


class MatchPair(NamedTuple):
    """One painting-to-photo match produced by the semantic matcher."""

    painting_id: str
    photo_id: str
    rank: int
    score: float


@dataclass
class DatasetManifest:
    name: str
    records: list[ImageRecord] = field(default_factory=list)
    pairs: list[MatchPair] = field(default_factory=list)
    created_at: str = ""
    provenance_note: str = ""

    def __post_init__(self) -> None:
        if not self.created_at:
            self.created_at = utc_now_iso()
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise DuplicateEntry(f"duplicate record id {rec.id}")
            seen.add(rec.id)
        for pair in self.pairs:
            if pair.painting_id not in seen:
                raise NotFound(f"pair references unknown painting {pair.painting_id}")
            if pair.photo_id not in seen:
                raise NotFound(f"pair references unknown photo {pair.photo_id}")
            if pair.rank < 1:
                raise ValueError(f"pair rank must be >= 1, got {pair.rank}")

    def by_id(self, record_id: str) -> ImageRecord:
        for rec in self.records:
            if rec.id == record_id:
                return rec
        raise NotFound(f"record {record_id} not in manifest {self.name}")

    def by_domain(self, domain_tag: str) -> list[ImageRecord]:
        return [r for r in self.records if r.domain_tag == domain_tag]

    def record_ids(self) -> set[str]:
        return {r.id for r in self.records}


@dataclass
class IngestResult:
    manifest: DatasetManifest
    skipped: list[tuple[str, str]]  # (path, reason)


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def file_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def record_id_for(relpath: str, checksum: str) -> str:
    return hashlib.sha256(f"{relpath}\n{checksum}".encode("utf-8")).hexdigest()[:16]


def _probe_image(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        img.load()
        return img.size  # (width, height)


def ingest_directory(
    root: str | Path,
    domain_tag: str,
    name: str | None = None,
    provenance_note: str = "",
    limit: int | None = None,
    workers: int = 1,
) -> IngestResult:
    """Scan a directory tree for images and build a manifest.

    Files are visited in sorted relative-path order so two ingests of the same
    tree produce identical manifests (apart from created_at). Undecodable or
    non-image files land on the skip list instead of failing the run.
    """
    root = Path(root)
    if not root.is_dir():
        raise NotFound(f"ingest root {root} is not a directory")

    candidates = sorted(
        p for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    skipped: list[tuple[str, str]] = []

    def load_one(path: Path) -> ImageRecord | None:
        rel = path.relative_to(root).as_posix()
        try:
            width, height = _probe_image(path)
        except Exception as exc:
            log.warning("skipping %s: %s", rel, exc)
            skipped.append((rel, str(exc)))
            return None
        checksum = file_checksum(path)
        return ImageRecord(
            id=record_id_for(rel, checksum),
            domain_tag=domain_tag,
            path=str(path),
            width=width,
            height=height,
            checksum=checksum,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maybe = list(pool.map(load_one, candidates))
    else:
        maybe = [load_one(p) for p in candidates]
    records = [r for r in maybe if r is not None]

    if limit is not None:
        records = records[:limit]
    if not records:
        raise EmptyCorpus(f"no decodable images under {root}")

    manifest = DatasetManifest(
        name=name or root.name,
        records=records,
        provenance_note=provenance_note,
    )
    return IngestResult(manifest=manifest, skipped=skipped)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "name": manifest.name,
        "created_at": manifest.created_at,
        "provenance_note": manifest.provenance_note,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            row = {
                "kind": "record",
                "id": rec.id,
                "domain_tag": rec.domain_tag,
                "path": rec.path,
                "width": rec.width,
                "height": rec.height,
                "checksum": rec.checksum,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        for pair in manifest.pairs:
            row = {
                "kind": "pair",
                "painting_id": pair.painting_id,
                "photo_id": pair.photo_id,
                "rank": pair.rank,
                "score": pair.score,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"manifest {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise IncompatibleManifest(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise IncompatibleManifest(f"manifest {path}: bad header: {exc}") from exc
    if not isinstance(header, dict) or "schema_version" not in header:
        raise IncompatibleManifest(f"manifest {path}: header missing schema_version")
    if header["schema_version"] != MANIFEST_SCHEMA_VERSION:
        raise IncompatibleManifest(
            f"manifest {path}: schema_version {header['schema_version']} "
            f"not supported (expected {MANIFEST_SCHEMA_VERSION})"
        )

    records: list[ImageRecord] = []
    pairs: list[MatchPair] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IncompatibleManifest(
                f"manifest {path}:{lineno}: bad JSON: {exc}"
            ) from exc
        kind = row.get("kind")
        try:
            if kind == "record":
                records.append(ImageRecord(
                    id=row["id"],
                    domain_tag=row["domain_tag"],
                    path=row["path"],
                    width=row["width"],
                    height=row["height"],
                    checksum=row["checksum"],
                ))
            elif kind == "pair":
                pairs.append(MatchPair(
                    painting_id=row["painting_id"],
                    photo_id=row["photo_id"],
                    rank=int(row["rank"]),
                    score=float(row["score"]),
                ))
            else:
                raise IncompatibleManifest(
                    f"manifest {path}:{lineno}: unknown kind {kind!r}"
                )
        except KeyError as exc:
            raise IncompatibleManifest(
                f"manifest {path}:{lineno}: missing field {exc}"
            ) from exc
    return DatasetManifest(
        name=header.get("name", path.stem),
        records=records,
        pairs=pairs,
        created_at=header.get("created_at", ""),
        provenance_note=header.get("provenance_note", ""),
    )


def merge_manifests(name: str, manifests: Iterable[DatasetManifest],
                    pairs: Sequence[MatchPair] = ()) -> DatasetManifest:
    """Union of records (ids must not collide) plus an optional pair list."""
    records: list[ImageRecord] = []
    for m in manifests:
        records.extend(m.records)
    return DatasetManifest(name=name, records=records, pairs=list(pairs))


def verify_checksum(record: ImageRecord) -> bool:
    """True when the file at record.path still hashes to record.checksum."""
    try:
        return file_checksum(record.path) == record.checksum
    except OSError:
        return False


def relocate(record: ImageRecord, path: str | Path) -> ImageRecord:
    return replace(record, path=str(path))
