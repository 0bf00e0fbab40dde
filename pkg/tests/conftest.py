"""Shared fixtures: procedural toy images and two-domain corpora.

Every toy image is produced from an explicit integer seed so any test can be
re-run in isolation and see byte-identical inputs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from p2d.corpus import (
    DatasetManifest,
    ingest_directory,
    merge_manifests,
    save_manifest,
)
from p2d.pipeline import PipelineConfig

TINY_TRAIN = {
    "iterations": 2, "batch_size": 2, "learning_rate": 1e-3,
    "image_size": 16, "base_channels": 4, "n_res_blocks": 1,
    "seed": 0, "checkpoint_every": 2,
}


def shape_image(seed: int, size: int = 32, invert: bool = False) -> np.ndarray:
    """Procedural scene: a handful of bright rectangles/discs on a dark field."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size, 3), rng.integers(16, 80, size=3), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 5)):
        color = rng.integers(100, 256, size=3)
        cy, cx = rng.integers(4, size - 4, size=2)
        if rng.integers(0, 2) == 0:
            h, w = rng.integers(3, size // 2, size=2)
            mask = (np.abs(yy - cy) <= h // 2) & (np.abs(xx - cx) <= w // 2)
        else:
            r = rng.integers(3, size // 3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[mask] = color
    if invert:
        img = 255 - img
    return img


def restyled(base: np.ndarray) -> np.ndarray:
    """Same geometry as ``base`` but different appearance (hue roll + gamma)."""
    arr = np.roll(base, 1, axis=2).astype(np.float64) / 255.0
    return (np.clip(arr ** 0.7, 0.0, 1.0) * 255).astype(np.uint8)


def write_png(path: Path, arr: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


def build_two_domain_corpus(
    root: Path,
    n_per_domain: int = 6,
    size: int = 32,
    seed: int = 0,
) -> DatasetManifest:
    """Paintings = procedural shapes; photos = color-inverted shapes.

    The two sides use disjoint seed ranges, so the domains are unpaired.
    """
    pdir = root / "paintings"
    sdir = root / "photos"
    for i in range(n_per_domain):
        write_png(pdir / f"p{i:03d}.png", shape_image(seed + 1000 + i, size))
        write_png(sdir / f"s{i:03d}.png",
                  shape_image(seed + 5000 + i, size, invert=True))
    paintings = ingest_directory(pdir, "painting", name="toy-paintings").manifest
    photos = ingest_directory(sdir, "photo", name="toy-photos").manifest
    return merge_manifests("toy", [paintings, photos])


def make_pipeline_config(tmp_path: Path, n_paintings: int = 3,
                         n_photos: int = 5, **overrides) -> PipelineConfig:
    """Write a tiny two-domain source tree plus manifests and return a fast
    end-to-end pipeline configuration rooted at ``tmp_path``."""
    pdir, sdir = tmp_path / "src_paintings", tmp_path / "src_photos"
    for i in range(n_paintings):
        write_png(pdir / f"p{i}.png", shape_image(800 + i))
    for i in range(n_photos):
        write_png(sdir / f"s{i}.png", shape_image(900 + i, invert=True))
    paintings = ingest_directory(pdir, "painting", name="P").manifest
    photos = ingest_directory(sdir, "photo", name="S").manifest
    pm, sm = tmp_path / "paintings.ndjson", tmp_path / "photos.ndjson"
    save_manifest(paintings, pm)
    save_manifest(photos, sm)
    base = dict(
        paintings_manifest=str(pm),
        photos_manifest=str(sm),
        output_root=str(tmp_path / "run"),
        k=2,
        encoder={"name": "stub", "dim": 32, "seed": 0},
        train=dict(TINY_TRAIN),
        refine={"backend": "stub", "steps": 3, "strength": 0.5, "seed": 0},
        depth={"backend": "luminance"},
        mesh={"pitch_mm": 0.5, "relief_height_mm": 4.0,
              "base_thickness_mm": 1.0},
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture()
def two_domain_corpus(tmp_path: Path) -> DatasetManifest:
    return build_two_domain_corpus(tmp_path / "corpus")


@pytest.fixture()
def painting_dir(tmp_path: Path) -> Path:
    d = tmp_path / "paintings"
    for i in range(4):
        write_png(d / f"img{i}.png", shape_image(100 + i))
    return d
