"""Command line entry point: `p2d <subcommand>`."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import DOMAIN_TAGS, ingest_directory, load_manifest, save_manifest
from .dictionary import default_dictionary, load_dictionary
from .encoders import CACHE_ENV_VAR, EmbeddingCache, make_encoder
from .errors import P2DError
from .matching import build_matched_dataset
from .gan.train import train
from .gan import TrainConfig, build_translator_pair, load_checkpoint, \
    translate_to_pseudo_real
from .refine import RefineRequest, make_refine_backend, refine
from .depth import (
    depth_to_relief_mesh,
    estimate_depth,
    export_depth_png16,
    make_depth_backend,
    normalize_depth,
    write_obj,
    write_stl,
)
from .pipeline import PipelineConfig, k_sweep, run_full

log = logging.getLogger(__name__)


def _load_dictionary(path: str | None):
    return load_dictionary(path) if path else default_dictionary()


def cmd_ingest(args: argparse.Namespace) -> int:
    result = ingest_directory(
        args.root, args.domain,
        name=args.name, provenance_note=args.provenance,
        limit=args.limit, workers=args.workers,
    )
    save_manifest(result.manifest, args.out)
    print(f"wrote {args.out}: {len(result.manifest.records)} records, "
          f"{len(result.skipped)} skipped")
    for path, reason in result.skipped:
        log.warning("skipped %s: %s", path, reason)
    return 0


def cmd_match(args: argparse.Namespace) -> int:
    paintings = load_manifest(args.paintings)
    photos = load_manifest(args.photos)
    dictionary = _load_dictionary(args.dict)
    encoder = make_encoder(args.encoder)
    cache = EmbeddingCache(args.cache) if args.cache else None
    matched = build_matched_dataset(
        paintings, photos, dictionary, args.k,
        text_encoder=encoder, image_encoder=encoder,
        temperature=args.temperature, cache=cache,
    )
    save_manifest(matched, args.out)
    print(f"wrote {args.out}: {len(matched.pairs)} pairs "
          f"({len(matched.by_domain('photo'))} matched photos)")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.pairs)
    with open(args.config, "r", encoding="utf-8") as fh:
        config = TrainConfig.from_dict(json.load(fh))
    pair = build_translator_pair(config)
    result = train(pair, manifest, config, args.out)
    final = result.reports[-1] if result.reports else None
    print(f"trained {config.iterations} steps into {args.out}"
          + (f", final total loss {final.total:.4f}" if final else ""))
    return 0


def cmd_translate(args: argparse.Namespace) -> int:
    from .corpus import ImageRecord, file_checksum, record_id_for
    from PIL import Image

    src = Path(args.infile)
    with Image.open(src) as img:
        width, height = img.size
    checksum = file_checksum(src)
    record = ImageRecord(
        id=record_id_for(src.name, checksum), domain_tag="painting",
        path=str(src), width=width, height=height, checksum=checksum,
    )
    out_dir = Path(args.out).parent
    produced = translate_to_pseudo_real(args.ckpt, record, out_dir)
    Path(produced.path).replace(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_refine(args: argparse.Namespace) -> int:
    backend = make_refine_backend(args.backend, args.exec)
    request = RefineRequest(
        content_image=args.content,
        reference_image=args.reference,
        out_path=args.out,
        steps=args.steps,
        strength=args.strength,
        seed=args.seed,
    )
    result = refine(request, backend)
    print(f"wrote {args.out} (structure score {result.structure_score:.4f}, "
          f"backend {result.backend_id})")
    return 0


def cmd_depth(args: argparse.Namespace) -> int:
    backend = make_depth_backend(args.backend, args.exec)
    depth_map = normalize_depth(estimate_depth(args.infile, backend))
    export_depth_png16(depth_map, args.out)
    print(f"wrote {args.out} ({depth_map.shape[1]}x{depth_map.shape[0]})")
    if args.mesh:
        mesh = depth_to_relief_mesh(depth_map, pitch_mm=args.pitch,
                                    relief_height_mm=args.height,
                                    base_thickness_mm=args.base)
        write_stl(mesh, args.mesh)
        print(f"wrote {args.mesh} ({len(mesh.triangles)} triangles)")
        if args.obj:
            write_obj(mesh, args.obj)
            print(f"wrote {args.obj}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = PipelineConfig.from_json(args.config)
    record = run_full(config)
    counters = ", ".join(
        f"{name}: {c.computed} computed / {c.skipped} skipped"
        for name, c in record.stages.items()
    )
    print(f"run {record.run_id}: {len(record.items)} items, "
          f"{len(record.failures)} failures ({counters})")
    return 1 if record.failures and not record.items else 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = PipelineConfig.from_json(args.config)
    k_values = [int(v) for v in args.k.split(",") if v.strip()]
    records = k_sweep(config, k_values)
    print(f"swept K={k_values}: {len(records)} runs under {config.output_root}")
    return 0


def cmd_serve_study(args: argparse.Namespace) -> int:
    from .study.service import serve

    study_dir = Path(args.study)
    # Accept either a store root or a single study directory within one.
    if (study_dir / "definition.json").is_file():
        store_root = study_dir.parent
    else:
        store_root = study_dir
    serve(store_root, host=args.host, port=args.port, ui_dir=args.ui)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p2d",
        description="Landscape painting to real-scene photo, depth map, and "
                    "printable relief pipeline.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan an image directory into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--domain", required=True, choices=DOMAIN_TAGS)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default=None)
    p.add_argument("--provenance", default="")
    p.add_argument("--limit", type=int, default=None,
                   help="keep only the first N records (sorted by path)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("match", help="build the 1-to-K matched training set")
    p.add_argument("--paintings", required=True)
    p.add_argument("--photos", required=True)
    p.add_argument("--dict", default=None,
                   help="dictionary TSV (builtin when omitted)")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--encoder", default="stub", choices=("stub", "clip"))
    p.add_argument("--cache", default=None,
                   help=f"embedding cache dir (or set {CACHE_ENV_VAR})")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", help="train the translation networks")
    p.add_argument("--pairs", required=True, help="matched manifest")
    p.add_argument("--config", required=True, help="train config JSON")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="painting -> pseudo-real image")
    p.add_argument("--ckpt", required=True, help="training run directory")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("refine", help="pseudo-real -> real-scene image")
    p.add_argument("--content", required=True, help="the painting")
    p.add_argument("--reference", required=True, help="the pseudo-real image")
    p.add_argument("--backend", default="stub", choices=("stub", "external"))
    p.add_argument("--out", required=True)
    p.add_argument("--exec", default=None, help="external backend executable")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--strength", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("depth", help="estimate + export depth (and mesh)")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--backend", default="luminance")
    p.add_argument("--out", required=True, help="16-bit depth PNG path")
    p.add_argument("--exec", default=None, help="external backend executable")
    p.add_argument("--mesh", default=None, help="optional STL output path")
    p.add_argument("--obj", default=None, help="optional OBJ output path")
    p.add_argument("--pitch", type=float, default=0.2, help="mm per pixel")
    p.add_argument("--height", type=float, default=8.0, help="relief mm")
    p.add_argument("--base", type=float, default=2.0, help="base plate mm")
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the pipeline once per K value")
    p.add_argument("--config", required=True)
    p.add_argument("--k", required=True, help="comma-separated K values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve-study", help="serve the study HTTP API")
    p.add_argument("--study", required=True,
                   help="study store root (or one study directory)")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--ui", default=None, help="static UI bundle directory")
    p.set_defaults(func=cmd_serve_study)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except P2DError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
