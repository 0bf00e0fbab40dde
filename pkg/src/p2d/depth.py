"""Relative depth estimation, normalization, and fabrication exports.

Depth values are relative inverse depth: larger means nearer the camera, so
the relief mesh's raised regions are the scene's foreground. Exporters keep
that orientation; nothing downstream should re-invert.
"""

from __future__ import annotations

import shutil
import struct
import subprocess
import tempfile
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

from .corpus import ImageRecord
from .errors import (
    BackendUnavailable,
    DecodeError,
    NotFound,
    NotNormalized,
    TooSmall,
)
from .refine import load_image_unit, to_gray

PNG16_MAX = 65535


@dataclass
class DepthMap:
    """H x W grid of finite relative inverse-depth values.

    When normalized, values live in [0, 1] and span it exactly (min 0, max 1)
    unless the map is constant.
    """

    values: np.ndarray
    source_image_id: str = ""
    normalized: bool = False

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"depth values must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("depth values must all be finite")
        if self.normalized:
            vmin, vmax = float(values.min()), float(values.max())
            if vmin < 0.0 or vmax > 1.0:
                raise ValueError("normalized depth must lie in [0, 1]")
            if vmin != vmax and (vmin != 0.0 or vmax != 1.0):
                raise ValueError(
                    "normalized non-constant depth must span [0, 1] exactly"
                )
        self.values = values

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


@runtime_checkable
class DepthBackend(Protocol):
    """Depth backends take an image path and return a 2-D value grid.
    concurrency declares sharing rules exactly like refine backends."""

    version: str
    concurrency: str

    def estimate(self, image_path: str) -> np.ndarray: ...


class LuminanceDepthBackend:
    """Desk-scale stub: image luminance as relative inverse depth (brighter
    pixels read as nearer)."""

    version = "luminance-1"
    concurrency = "synchronized"

    def estimate(self, image_path: str) -> np.ndarray:
        return to_gray(load_image_unit(image_path))


class ExternalDepthBackend:
    """Subprocess adapter mirroring the refine backend contract: the
    executable is invoked with (image path, output .npy path) and must exit 0
    after writing a 2-D float array."""

    concurrency = "per_worker"

    def __init__(self, command: str):
        self.command = command
        self.version = f"external-depth:{Path(command).name}"

    def estimate(self, image_path: str) -> np.ndarray:
        if shutil.which(self.command) is None and not Path(self.command).is_file():
            raise BackendUnavailable(f"depth backend {self.command!r} not found")
        with tempfile.TemporaryDirectory(prefix="p2d-depth-") as tmp:
            out_path = str(Path(tmp) / "depth.npy")
            proc = subprocess.run(
                [self.command, image_path, out_path],
                capture_output=True, text=True,
            )
            if proc.returncode != 0:
                raise BackendUnavailable(
                    f"depth backend {self.command!r} exited "
                    f"{proc.returncode}: {proc.stderr.strip()[:500]}"
                )
            try:
                values = np.load(out_path)
            except Exception as exc:
                raise BackendUnavailable(
                    f"depth backend {self.command!r} wrote unreadable output: {exc}"
                ) from exc
        return np.asarray(values, dtype=np.float64)


def make_depth_backend(name: str, command: str | None = None) -> DepthBackend:
    if name in ("stub", "luminance"):
        return LuminanceDepthBackend()
    if name == "external":
        if not command:
            raise BackendUnavailable("external depth backend needs a command")
        return ExternalDepthBackend(command)
    raise BackendUnavailable(f"unknown depth backend {name!r}")


def estimate_depth(image: ImageRecord | str | Path,
                   depth_backend: DepthBackend) -> DepthMap:
    if isinstance(image, ImageRecord):
        path, source_id = image.path, image.id
    else:
        path, source_id = str(image), Path(image).stem
    if not Path(path).is_file():
        raise NotFound(f"image {path} does not exist")
    values = depth_backend.estimate(str(path))
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DecodeError(
            f"depth backend {depth_backend.version} returned shape {values.shape}"
        )
    return DepthMap(values=values, source_image_id=source_id, normalized=False)


def normalize_depth(depth_map: DepthMap) -> DepthMap:
    """Affine rescale to [0, 1]; constant maps become all 0.5 so degenerate
    outputs still print as a flat plate. Idempotent and order-preserving."""
    values = depth_map.values
    vmin, vmax = float(values.min()), float(values.max())
    if vmin == vmax:
        scaled = np.full_like(values, 0.5)
    else:
        scaled = (values - vmin) / (vmax - vmin)
    return DepthMap(values=scaled, source_image_id=depth_map.source_image_id,
                    normalized=True)


def export_depth_png16(depth_map: DepthMap, path: str | Path) -> None:
    """16-bit single-channel PNG with pixel = round-half-up(v * 65535)."""
    if not depth_map.normalized:
        raise NotNormalized("export requires a normalized depth map")
    quantized = np.floor(depth_map.values * PNG16_MAX + 0.5).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantized).save(path)  # uint16 array => 16-bit PNG


def import_depth_png16(path: str | Path, source_image_id: str = "") -> DepthMap:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"depth PNG {path} does not exist")
    try:
        with Image.open(path) as img:
            if img.mode not in ("I;16", "I"):
                raise DecodeError(
                    f"{path} is not a 16-bit single-channel PNG (mode {img.mode})"
                )
            arr = np.asarray(img, dtype=np.float64)
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"cannot decode depth PNG {path}: {exc}") from exc
    return DepthMap(values=arr / PNG16_MAX,
                    source_image_id=source_image_id or path.stem,
                    normalized=True)


@dataclass
class ReliefMesh:
    """Solid relief: full-resolution top surface at
    z = base_thickness + value * relief_height, mirrored flat bottom at z = 0,
    and four side walls. Watertight by construction."""

    vertices: np.ndarray   # (N, 3) float64, millimeters
    triangles: np.ndarray  # (M, 3) int64 vertex indices, outward winding
    base_thickness: float


def depth_to_relief_mesh(
    depth_map: DepthMap,
    pitch_mm: float,
    relief_height_mm: float,
    base_thickness_mm: float,
) -> ReliefMesh:
    """Triangulate a normalized depth map into a printable solid.

    Pixel (i, j) sits at x = j * pitch, y = (H-1-i) * pitch (image row 0 at
    the top of the plate), top z in [base, base + relief]; the solid spans
    z = 0 at the base underside.
    """
    if not depth_map.normalized:
        raise NotNormalized("mesh generation requires a normalized depth map")
    for name, value in (("pitch_mm", pitch_mm),
                        ("relief_height_mm", relief_height_mm),
                        ("base_thickness_mm", base_thickness_mm)):
        if value <= 0:
            raise ValueError(f"{name} must be > 0, got {value}")
    values = depth_map.values
    h, w = values.shape
    if h < 2 or w < 2:
        raise TooSmall(f"need at least a 2x2 depth map, got {h}x{w}")

    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    xs = jj * pitch_mm
    ys = (h - 1 - ii) * pitch_mm
    top_z = base_thickness_mm + values * relief_height_mm
    top = np.stack([xs, ys, top_z], axis=-1).reshape(-1, 3)
    bottom = np.stack([xs, ys, np.zeros_like(top_z)], axis=-1).reshape(-1, 3)
    vertices = np.concatenate([top, bottom], axis=0)

    def t(i: int, j: int) -> int:
        return i * w + j

    def b(i: int, j: int) -> int:
        return h * w + i * w + j

    triangles: list[tuple[int, int, int]] = []
    for i in range(h - 1):
        for j in range(w - 1):
            # Top faces wind counter-clockwise seen from +z.
            triangles.append((t(i, j), t(i + 1, j + 1), t(i, j + 1)))
            triangles.append((t(i, j), t(i + 1, j), t(i + 1, j + 1)))
            # Bottom faces mirror the winding so normals point down.
            triangles.append((b(i, j), b(i, j + 1), b(i + 1, j + 1)))
            triangles.append((b(i, j), b(i + 1, j + 1), b(i + 1, j)))

    # Perimeter of the top grid, counter-clockwise viewed from +z.
    boundary: list[tuple[int, int]] = []
    boundary += [(h - 1, j) for j in range(w)]            # south, +x
    boundary += [(i, w - 1) for i in range(h - 2, -1, -1)]  # east, +y
    boundary += [(0, j) for j in range(w - 2, -1, -1)]    # north, -x
    boundary += [(i, 0) for i in range(1, h - 1)]         # west, -y
    for k in range(len(boundary)):
        i1, j1 = boundary[k]
        i2, j2 = boundary[(k + 1) % len(boundary)]
        v1, v2 = t(i1, j1), t(i2, j2)
        u1, u2 = b(i1, j1), b(i2, j2)
        triangles.append((v2, v1, u1))
        triangles.append((v2, u1, u2))

    return ReliefMesh(
        vertices=vertices,
        triangles=np.asarray(triangles, dtype=np.int64),
        base_thickness=float(base_thickness_mm),
    )


def edge_use_counts(triangles: np.ndarray) -> Counter:
    """Undirected edge -> number of triangles using it."""
    counts: Counter = Counter()
    for a, b, c in np.asarray(triangles):
        for u, v in ((a, b), (b, c), (c, a)):
            counts[(min(u, v), max(u, v))] += 1
    return counts


def is_watertight(mesh: ReliefMesh) -> bool:
    """Every undirected edge shared by exactly two triangles, every directed
    edge used exactly once (consistent orientation), no degenerate faces."""
    directed: Counter = Counter()
    for a, b, c in mesh.triangles:
        if a == b or b == c or a == c:
            return False
        for u, v in ((a, b), (b, c), (c, a)):
            directed[(int(u), int(v))] += 1
    for (u, v), n in directed.items():
        if n != 1 or directed.get((v, u), 0) != 1:
            return False
    return True


def write_stl(mesh: ReliefMesh, path: str | Path) -> None:
    """Binary little-endian STL: 80-byte header, uint32 triangle count, then
    per triangle a float32 normal, three float32 vertices, uint16 zero."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    verts = mesh.vertices
    header = b"relief mesh (units mm, +z = nearer)"
    header = header + b"\x00" * (80 - len(header))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", len(mesh.triangles)))
        for a, b, c in mesh.triangles:
            pa, pb, pc = verts[a], verts[b], verts[c]
            normal = np.cross(pb - pa, pc - pa)
            length = np.linalg.norm(normal)
            if length > 0:
                normal = normal / length
            fh.write(struct.pack("<3f", *normal.astype(np.float32)))
            for p in (pa, pb, pc):
                fh.write(struct.pack("<3f", *p.astype(np.float32)))
            fh.write(struct.pack("<H", 0))


def write_obj(mesh: ReliefMesh, path: str | Path) -> None:
    """ASCII OBJ companion export (1-indexed faces)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# relief mesh, units mm, +z = nearer\n")
        for x, y, z in mesh.vertices:
            # repr of a plain float is the shortest string that parses back
            # to the same value, so the export stays lossless.
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
