"""Build a tiny finished pipeline run plus an empty study store.

Fixture for the browser client's end-to-end tests. Usage:

    python3 make_store.py WORKDIR

Prints two lines: the finished run directory and the study store root.
Everything the tests need beyond these paths travels over HTTP.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from p2d.corpus import ingest_directory, save_manifest
from p2d.pipeline import PipelineConfig, run_full


def toy_image(seed: int, size: int = 32, invert: bool = False) -> np.ndarray:
    """A smooth random color field; distinct per seed, cheap to process."""
    rng = np.random.default_rng(seed)
    coarse = (rng.uniform(0.0, 1.0, (4, 4, 3)) * 255).astype(np.uint8)
    img = Image.fromarray(coarse).resize((size, size), Image.BILINEAR)
    arr = np.asarray(img)
    return 255 - arr if invert else arr


def main() -> int:
    work = Path(sys.argv[1])
    pdir, sdir = work / "src_paintings", work / "src_photos"
    pdir.mkdir(parents=True, exist_ok=True)
    sdir.mkdir(parents=True, exist_ok=True)
    for i in range(5):
        Image.fromarray(toy_image(100 + i)).save(pdir / f"p{i}.png")
    for i in range(6):
        Image.fromarray(toy_image(200 + i, invert=True)).save(sdir / f"s{i}.png")

    paintings = ingest_directory(pdir, "painting", name="P").manifest
    photos = ingest_directory(sdir, "photo", name="S").manifest
    pm, sm = work / "paintings.ndjson", work / "photos.ndjson"
    save_manifest(paintings, pm)
    save_manifest(photos, sm)

    config = PipelineConfig(
        paintings_manifest=str(pm),
        photos_manifest=str(sm),
        output_root=str(work / "run"),
        k=2,
        encoder={"name": "stub", "dim": 32, "seed": 0},
        train={
            "iterations": 2, "batch_size": 2, "learning_rate": 1e-3,
            "image_size": 16, "base_channels": 4, "n_res_blocks": 1,
            "seed": 0, "checkpoint_every": 2,
        },
        refine={"backend": "stub", "steps": 3, "strength": 0.5, "seed": 0},
        depth={"backend": "luminance"},
        mesh=None,
    )
    record = run_full(config)
    if record.failures:
        raise SystemExit(f"fixture run had failures: {record.failures}")

    store = work / "studies"
    store.mkdir(exist_ok=True)
    print(config.output_root)
    print(store)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
