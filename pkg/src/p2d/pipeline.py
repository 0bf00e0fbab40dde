"""End-to-end orchestration: match -> train -> translate -> refine -> depth
-> optional mesh, with content-hash resume and per-item failure isolation.

Every stage execution leaves a stamp file recording the hash of its inputs and
the checksums of its outputs. A stage is skipped when its stamp matches the
current inputs and all recorded outputs are intact, so reruns with an
identical config and untouched artifacts do zero recomputation, while deleting
or editing an artifact recomputes exactly the affected stage and whatever
downstream work its changed content invalidates.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import PIL
import scipy
import torch

from PIL import Image

from . import __version__ as p2d_version
from .corpus import DatasetManifest, file_checksum, load_manifest, save_manifest
from .depth import (
    DepthMap,
    depth_to_relief_mesh,
    estimate_depth,
    export_depth_png16,
    make_depth_backend,
    normalize_depth,
    write_stl,
)
from .dictionary import default_dictionary, load_dictionary, save_dictionary
from .encoders import CACHE_ENV_VAR, EmbeddingCache, make_encoder
from .errors import NotFound
from .gan.train import train
from .gan import TrainConfig, build_translator_pair, load_checkpoint, \
    translate_to_pseudo_real
from .matching import build_matched_dataset
from .refine import RefineRequest, make_refine_backend, refine

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
RUN_RECORD_SCHEMA_VERSION = 1

STAGES = ("match", "train", "translate", "refine", "depth", "mesh")


@dataclass
class PipelineConfig:
    paintings_manifest: str
    photos_manifest: str
    output_root: str
    dictionary_path: str | None = None
    k: int = 1
    temperature: float = 0.07
    encoder: dict = field(default_factory=lambda: {"name": "stub", "dim": 64, "seed": 0})
    train: dict = field(default_factory=dict)
    refine: dict = field(default_factory=lambda: {
        "backend": "stub", "steps": 50, "strength": 0.6, "seed": 0})
    depth: dict = field(default_factory=lambda: {"backend": "luminance"})
    mesh: dict | None = None
    seed: int = 0
    workers: int = 1
    cache_dir: str | None = None

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise NotFound(f"config file {path} does not exist")
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        version = data.pop("schema_version", None)
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(
                f"config {path}: schema_version must be {CONFIG_SCHEMA_VERSION}, "
                f"got {version!r}"
            )
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"config {path}: unknown fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schema_version"] = CONFIG_SCHEMA_VERSION
        return out

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def validate_config(config: PipelineConfig) -> list[str]:
    """All validation problems, empty when the config is runnable."""
    problems: list[str] = []
    for label, path in (("paintings_manifest", config.paintings_manifest),
                        ("photos_manifest", config.photos_manifest)):
        if not Path(path).is_file():
            problems.append(f"{label} {path} does not exist")
    if config.dictionary_path is not None and not Path(config.dictionary_path).is_file():
        problems.append(f"dictionary {config.dictionary_path} does not exist")
    if config.k < 1:
        problems.append(f"k must be >= 1, got {config.k}")
    if config.workers < 1:
        problems.append(f"workers must be >= 1, got {config.workers}")
    if config.temperature <= 0:
        problems.append(f"temperature must be > 0, got {config.temperature}")
    try:
        TrainConfig.from_dict(config.train)
    except (ValueError, TypeError) as exc:
        problems.append(f"train config invalid: {exc}")
    if config.refine.get("backend", "stub") == "external" and not config.refine.get("command"):
        problems.append("external refine backend needs a command")
    if config.depth.get("backend", "luminance") == "external" and not config.depth.get("command"):
        problems.append("external depth backend needs a command")
    if config.mesh is not None:
        for key in ("pitch_mm", "relief_height_mm", "base_thickness_mm"):
            if config.mesh.get(key, 0) <= 0:
                problems.append(f"mesh.{key} must be > 0")
    return problems


@dataclass
class StageCounter:
    computed: int = 0
    skipped: int = 0
    failed: int = 0
    seconds: float = 0.0


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    created_at: str
    config: dict
    stages: dict[str, StageCounter] = field(default_factory=dict)
    items: dict[str, dict] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    tool_versions: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": RUN_RECORD_SCHEMA_VERSION,
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "created_at": self.created_at,
            "config": self.config,
            "stages": {name: asdict(c) for name, c in self.stages.items()},
            "items": self.items,
            "failures": self.failures,
            "tool_versions": self.tool_versions,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        path = Path(path)
        if path.is_dir():
            path = path / "run_record.json"
        if not path.is_file():
            raise NotFound(f"run record {path} does not exist")
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("schema_version") != RUN_RECORD_SCHEMA_VERSION:
            raise ValueError(f"run record {path}: unsupported schema_version")
        record = cls(
            run_id=data["run_id"],
            config_hash=data["config_hash"],
            created_at=data["created_at"],
            config=data["config"],
            items=data.get("items", {}),
            failures=data.get("failures", []),
            tool_versions=data.get("tool_versions", {}),
        )
        record.stages = {name: StageCounter(**c)
                         for name, c in data.get("stages", {}).items()}
        return record


def _hash_parts(*parts: Any) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(json.dumps(part, sort_keys=True, default=str).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def _load_stamp(path: Path) -> dict | None:
    if not path.is_file():
        return None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError):
        return None


def _outputs_intact(stamp: dict) -> bool:
    for out in stamp.get("outputs", []):
        path = Path(out["path"])
        if not path.is_file() or file_checksum(path) != out["checksum"]:
            return False
    return True


class _StageRunner:
    """Stamp bookkeeping shared by all stages of one run."""

    def __init__(self, run_root: Path, record: RunRecord):
        self.stamps = run_root / "stamps"
        self.stamps.mkdir(parents=True, exist_ok=True)
        self.record = record
        self._lock = threading.Lock()

    def counter(self, stage: str) -> StageCounter:
        with self._lock:
            return self.record.stages.setdefault(stage, StageCounter())

    def run(self, stage: str, item_key: str, input_hash: str,
            compute: Callable[[], tuple[list[str], dict]]) -> dict:
        """Execute or skip one (stage, item) unit; returns its stamp."""
        counter = self.counter(stage)
        stamp_path = self.stamps / f"{item_key}.{stage}.json"
        stamp = _load_stamp(stamp_path)
        if stamp is not None and stamp.get("input_hash") == input_hash \
                and _outputs_intact(stamp):
            with self._lock:
                counter.skipped += 1
            return stamp
        started = time.perf_counter()
        outputs, extra = compute()
        stamp = {
            "stage": stage,
            "item": item_key,
            "input_hash": input_hash,
            "outputs": [{"path": str(p), "checksum": file_checksum(p)}
                        for p in outputs],
            "extra": extra,
        }
        tmp = stamp_path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(stamp, fh, sort_keys=True)
        os.replace(tmp, stamp_path)
        with self._lock:
            counter.computed += 1
            counter.seconds += time.perf_counter() - started
        return stamp


def _tool_versions() -> dict[str, str]:
    return {
        "p2d": p2d_version,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "pillow": PIL.__version__,
        "scipy": scipy.__version__,
    }


def run_full(config: PipelineConfig) -> RunRecord:
    """Run the whole painting -> mesh flow for every painting in the corpus.

    Per-item errors are recorded and do not stop other items; the returned
    RunRecord carries per-stage computed/skipped counters, timings, artifact
    registry, and a failure summary, and is saved to
    <output_root>/run_record.json.
    """
    problems = validate_config(config)
    if problems:
        raise ValueError("invalid pipeline config: " + "; ".join(problems))

    run_root = Path(config.output_root)
    run_root.mkdir(parents=True, exist_ok=True)
    config_hash = config.config_hash()
    record = RunRecord(
        run_id=config_hash[:12],
        config_hash=config_hash,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        config=config.to_dict(),
        tool_versions=_tool_versions(),
    )
    runner = _StageRunner(run_root, record)

    paintings = load_manifest(config.paintings_manifest)
    photos = load_manifest(config.photos_manifest)
    if config.dictionary_path:
        dictionary = load_dictionary(config.dictionary_path)
        dictionary_source = str(config.dictionary_path)
    else:
        dictionary = default_dictionary()
        dictionary_source = "builtin"
        # Materialize the builtin dictionary for provenance.
        save_dictionary(dictionary, run_root / "dictionary.tsv")

    cache_dir = config.cache_dir or os.environ.get(CACHE_ENV_VAR) \
        or str(run_root / "cache")
    cache = EmbeddingCache(cache_dir)
    encoder = make_encoder(**config.encoder)

    # --- match (one unit for the whole corpus) -----------------------------
    matched_path = run_root / "matched.ndjson"
    match_hash = _hash_parts(
        "match",
        file_checksum(config.paintings_manifest),
        file_checksum(config.photos_manifest),
        dictionary_source,
        [asdict(e) for e in dictionary.entries],
        config.k, config.temperature, config.encoder,
    )

    def do_match() -> tuple[list[str], dict]:
        matched = build_matched_dataset(
            paintings, photos, dictionary, config.k,
            text_encoder=encoder, image_encoder=encoder,
            temperature=config.temperature, cache=cache,
        )
        save_manifest(matched, matched_path)
        return [str(matched_path)], {"pairs": len(matched.pairs)}

    runner.run("match", "corpus", match_hash, do_match)
    matched = load_manifest(matched_path)

    # --- train (exclusive, one unit) ---------------------------------------
    train_config = TrainConfig.from_dict(config.train)
    train_dir = run_root / "train"
    train_hash = _hash_parts("train", file_checksum(matched_path),
                             asdict(train_config))

    def do_train() -> tuple[list[str], dict]:
        pair = build_translator_pair(train_config)
        result = train(pair, matched, train_config, train_dir, extra_meta={
            "matched_manifest_checksum": file_checksum(matched_path),
            "dictionary_source": dictionary_source,
            "config_hash": config_hash,
        })
        final = result.checkpoint_steps[-1]
        ckpt = train_dir / f"{final:06d}"
        outputs = [str(ckpt / name) for name in
                   ("gen_p2o", "gen_o2p", "disc_ori", "disc_photo", "meta.json")]
        outputs.append(str(train_dir / "losses.csv"))
        return outputs, {"final_step": final, "checkpoint": str(ckpt)}

    train_stamp = runner.run("train", "corpus", train_hash, do_train)
    checkpoint_hash = _hash_parts(
        "checkpoint", [o["checksum"] for o in train_stamp["outputs"]])
    pair, loaded_train_config = load_checkpoint(train_dir)

    # --- per-item stages ----------------------------------------------------
    pseudo_dir = run_root / "pseudo"
    real_dir = run_root / "real"
    depth_dir = run_root / "depth"
    mesh_dir = run_root / "mesh"

    refine_cfg = dict(config.refine)
    refine_backend_name = refine_cfg.pop("backend", "stub")
    refine_command = refine_cfg.pop("command", None)
    depth_cfg = dict(config.depth)
    depth_backend_name = depth_cfg.pop("backend", "luminance")
    depth_command = depth_cfg.pop("command", None)

    shared_refine = make_refine_backend(refine_backend_name, refine_command)
    shared_depth = make_depth_backend(depth_backend_name, depth_command)

    def item_backends():
        """Honor each backend's concurrency declaration: shared instances
        only when declared synchronized, otherwise one per task."""
        rb = shared_refine if shared_refine.concurrency == "synchronized" \
            else make_refine_backend(refine_backend_name, refine_command)
        db = shared_depth if shared_depth.concurrency == "synchronized" \
            else make_depth_backend(depth_backend_name, depth_command)
        return rb, db

    def process_item(painting) -> tuple[str, dict]:
        refine_backend, depth_backend = item_backends()
        item: dict[str, Any] = {"painting_id": painting.id,
                                "painting_path": painting.path}

        translate_hash = _hash_parts("translate", checkpoint_hash,
                                     painting.checksum,
                                     loaded_train_config.image_size)

        def do_translate() -> tuple[list[str], dict]:
            rec = translate_to_pseudo_real(pair, painting, pseudo_dir,
                                           config=loaded_train_config)
            return [rec.path], {"record": asdict_record(rec)}

        stamp = runner.run("translate", painting.id, translate_hash, do_translate)
        pseudo = stamp["extra"]["record"]
        item["pseudo_real"] = pseudo

        refine_hash = _hash_parts("refine", painting.checksum,
                                  pseudo["checksum"], refine_backend.backend_id,
                                  refine_cfg)

        def do_refine() -> tuple[list[str], dict]:
            out_path = real_dir / f"{painting.id}_real.png"
            # Refinement compares structure at the working resolution the
            # translator produced; when the source painting is a different
            # size, resample it the same way the translator input was.
            content_path = painting.path
            scratch: Path | None = None
            if (painting.width, painting.height) != (pseudo["width"],
                                                     pseudo["height"]):
                scratch = real_dir / f"{painting.id}_content_work.png"
                real_dir.mkdir(parents=True, exist_ok=True)
                with Image.open(painting.path) as img:
                    img.convert("RGB").resize(
                        (pseudo["width"], pseudo["height"]), Image.BILINEAR,
                    ).save(scratch)
                content_path = str(scratch)
            try:
                request = RefineRequest(
                    content_image=content_path,
                    reference_image=pseudo["path"],
                    out_path=str(out_path),
                    steps=int(refine_cfg.get("steps", 50)),
                    strength=float(refine_cfg.get("strength", 0.6)),
                    seed=int(refine_cfg.get("seed", config.seed)),
                )
                result = refine(request, refine_backend)
            finally:
                if scratch is not None:
                    scratch.unlink(missing_ok=True)
            return [result.real_scene.path], {
                "record": asdict_record(result.real_scene),
                "structure_score": result.structure_score,
                "backend_id": result.backend_id,
            }

        stamp = runner.run("refine", painting.id, refine_hash, do_refine)
        real = stamp["extra"]["record"]
        item["real_scene"] = real
        item["structure_score"] = stamp["extra"]["structure_score"]

        depth_hash = _hash_parts("depth", real["checksum"], depth_backend.version)

        def do_depth() -> tuple[list[str], dict]:
            raw = estimate_depth(real["path"], depth_backend)
            raw = DepthMap(values=raw.values, source_image_id=real["id"],
                           normalized=False)
            norm = normalize_depth(raw)
            npy_path = depth_dir / f"{painting.id}_depth.npy"
            npy_path.parent.mkdir(parents=True, exist_ok=True)
            with open(npy_path, "wb") as fh:
                np.save(fh, norm.values)
            png_path = depth_dir / f"{painting.id}_depth16.png"
            export_depth_png16(norm, png_path)
            return [str(npy_path), str(png_path)], {
                "backend_version": depth_backend.version,
                "shape": list(norm.values.shape),
            }

        stamp = runner.run("depth", painting.id, depth_hash, do_depth)
        npy_path = stamp["outputs"][0]["path"]
        item["depth_npy"] = npy_path
        item["depth_png16"] = stamp["outputs"][1]["path"]

        if config.mesh is not None:
            mesh_hash = _hash_parts("mesh", stamp["outputs"][0]["checksum"],
                                    config.mesh)

            def do_mesh() -> tuple[list[str], dict]:
                values = np.load(npy_path)
                depth_map = DepthMap(values=values, source_image_id=real["id"],
                                     normalized=True)
                mesh = depth_to_relief_mesh(
                    depth_map,
                    pitch_mm=config.mesh["pitch_mm"],
                    relief_height_mm=config.mesh["relief_height_mm"],
                    base_thickness_mm=config.mesh["base_thickness_mm"],
                )
                stl_path = mesh_dir / f"{painting.id}.stl"
                write_stl(mesh, stl_path)
                return [str(stl_path)], {
                    "vertices": int(len(mesh.vertices)),
                    "triangles": int(len(mesh.triangles)),
                }

            stamp = runner.run("mesh", painting.id, mesh_hash, do_mesh)
            item["mesh_stl"] = stamp["outputs"][0]["path"]

        return painting.id, item

    def record_outcome(painting, call) -> None:
        try:
            painting_id, item = call()
            record.items[painting_id] = item
        except Exception as exc:  # per-item isolation: keep other items going
            record.failures.append({
                "item": painting.id,
                "error": f"{type(exc).__name__}: {exc}",
            })
            log.warning("item %s failed: %s", painting.id, exc)

    painting_records = matched.by_domain("painting")
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [(pool.submit(process_item, p), p) for p in painting_records]
            for future, painting in futures:
                record_outcome(painting, future.result)
    else:
        for painting in painting_records:
            record_outcome(painting, lambda p=painting: process_item(p))

    record.save(run_root / "run_record.json")
    return record


def asdict_record(record) -> dict:
    return {
        "id": record.id,
        "domain_tag": record.domain_tag,
        "path": record.path,
        "width": record.width,
        "height": record.height,
        "checksum": record.checksum,
    }


def _match_score_stats(manifest: DatasetManifest) -> dict:
    scores = [pair.score for pair in manifest.pairs]
    if not scores:
        return {"count": 0}
    return {
        "count": len(scores),
        "min": min(scores),
        "max": max(scores),
        "mean": sum(scores) / len(scores),
    }


def k_sweep(config: PipelineConfig, k_values: list[int]) -> list[RunRecord]:
    """One isolated run per K plus a comparison sheet of match-score
    distributions (and study aggregates where a study store exists under a
    run's directory as <run>/study)."""
    if not k_values:
        raise ValueError("k_values must be non-empty")
    deduped: list[int] = []
    for k in k_values:
        if k in deduped:
            log.warning("duplicate K value %d ignored", k)
        else:
            deduped.append(k)

    root = Path(config.output_root)
    shared_cache = config.cache_dir or str(root / "cache")
    records: list[RunRecord] = []
    summary_rows: list[dict] = []
    for k in deduped:
        sub = replace(config, k=k, output_root=str(root / f"k{k}"),
                      cache_dir=shared_cache)
        rec = run_full(sub)
        records.append(rec)
        matched = load_manifest(Path(sub.output_root) / "matched.ndjson")
        row: dict[str, Any] = {
            "k": k,
            "run_id": rec.run_id,
            "run_dir": sub.output_root,
            "match_scores": _match_score_stats(matched),
            "items": len(rec.items),
            "failures": len(rec.failures),
        }
        study_aggregate = _sweep_study_aggregate(Path(sub.output_root) / "study")
        if study_aggregate is not None:
            row["study"] = study_aggregate
        summary_rows.append(row)

    summary = {
        "schema_version": 1,
        "k_values": deduped,
        "runs": summary_rows,
    }
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return records


def _sweep_study_aggregate(study_root: Path) -> list[dict] | None:
    if not study_root.is_dir():
        return None
    from .study import StudyStore, aggregate_study
    from .errors import NoData
    store = StudyStore(study_root)
    rows = []
    for study_id in store.list_studies():
        try:
            aggregate = aggregate_study(store, study_id)
        except NoData:
            continue
        rows.append({"study_id": study_id, **aggregate.to_dict()})
    return rows or None
