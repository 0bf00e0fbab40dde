"""Second translation step: refine (painting, pseudo-real) into the final
real-scene image.

The painting is the content (structure source) and the pseudo-real image the
reference (appearance source). Two backends sit behind one interface: a
subprocess adapter for an external pretrained diffusion translator, and a
deterministic desk-scale stub that noises the reference, fits a small linear
denoiser against it, and denoises while pulling the result toward the
content's edge map. The module also owns structure_score, the windowed
structural-similarity metric used to judge structure preservation.
"""

from __future__ import annotations

import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image
from scipy import ndimage

from .corpus import ImageRecord, file_checksum, record_id_for
from .errors import BackendUnavailable, DecodeError, NotFound, ShapeError, WindowError

DEFAULT_STEPS = 50
DEFAULT_STRENGTH = 0.6

WINDOW = 8
SSIM_C1 = 0.01 ** 2  # (k1 * L)^2 with L = 1
SSIM_C2 = 0.03 ** 2

# ITU-R BT.601 luminance weights.
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


def load_image_unit(path: str | Path) -> np.ndarray:
    """Decode to float64 HxWx3 in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except Exception as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def save_image_unit(arr: np.ndarray, path: str | Path) -> None:
    arr = np.clip(arr, 0.0, 1.0)
    Image.fromarray(np.floor(arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def to_gray(image: np.ndarray) -> np.ndarray:
    """Grayscale float64 view; 2-D arrays pass through untouched."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ LUMA
    raise ShapeError(f"expected (H, W) or (H, W, 3), got {image.shape}")


def _window_sums(x: np.ndarray, w: int) -> np.ndarray:
    """Sum of every w-by-w sliding window, via an integral image."""
    integral = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=np.float64)
    integral[1:, 1:] = np.cumsum(np.cumsum(x, axis=0), axis=1)
    return (integral[w:, w:] - integral[:-w, w:]
            - integral[w:, :-w] + integral[:-w, :-w])


def structure_score(image_a: np.ndarray, image_b: np.ndarray,
                    window: int = WINDOW) -> float:
    """Mean local structural-similarity index over sliding windows.

    Uniform window weights, unit data range. Identical inputs score exactly
    1.0 and the metric is symmetric in its arguments.
    """
    a = to_gray(image_a)
    b = to_gray(image_b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise WindowError(
            f"image {a.shape} smaller than one {window}x{window} window"
        )
    n = float(window * window)
    mu_a = _window_sums(a, window) / n
    mu_b = _window_sums(b, window) / n
    # Uncentered second moments; variances via E[x^2] - E[x]^2.
    saa = _window_sums(a * a, window) / n - mu_a * mu_a
    sbb = _window_sums(b * b, window) / n - mu_b * mu_b
    sab = _window_sums(a * b, window) / n - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sab + SSIM_C2)
    denominator = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return float(np.mean(numerator / denominator))


@dataclass
class RefineRequest:
    """content_image is the structure source (the painting); reference_image
    the appearance source (the pseudo-real translation)."""

    content_image: str
    reference_image: str
    out_path: str
    steps: int = DEFAULT_STEPS
    strength: float = DEFAULT_STRENGTH
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        # strength 0 is the exact zero-noise limit, so the closed interval.
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must be in [0, 1], got {self.strength}")


@dataclass(frozen=True)
class RefineResult:
    real_scene: ImageRecord
    structure_score: float
    backend_id: str


@runtime_checkable
class RefineBackend(Protocol):
    """Backends declare how they may be shared across workers:
    "synchronized" instances are safe to call from multiple workers,
    "per_worker" instances must be constructed once per worker."""

    backend_id: str
    concurrency: str

    def run(self, content_path: str, reference_path: str, out_path: str,
            steps: int, strength: float, seed: int) -> None: ...


class StubRefineBackend:
    """Deterministic reference-guided refinement without model weights.

    Noises the reference to `strength`, fits a 3x3 linear denoising kernel by
    least squares against the clean reference (the per-call "trained"
    denoiser), then alternates denoising pulls with a Sobel edge-map penalty
    step toward the content image. All corrections scale with strength, so the
    output approaches the reference continuously as strength drops, and
    strength 0 short-circuits to a bit-exact copy.
    """

    backend_id = "stub-refiner-1"
    concurrency = "synchronized"  # pure function of its arguments

    def run(self, content_path: str, reference_path: str, out_path: str,
            steps: int, strength: float, seed: int) -> None:
        reference = load_image_unit(reference_path)
        content = load_image_unit(content_path)
        if reference.shape != content.shape:
            raise ShapeError(
                f"content {content.shape} vs reference {reference.shape}"
            )
        if strength == 0.0:
            # Bit-exact zero-noise limit: re-emit the reference pixels.
            save_image_unit(reference, out_path)
            return

        rng = np.random.default_rng(seed)
        x = reference + strength * rng.standard_normal(reference.shape)
        kernel = self._fit_denoiser(x, reference, rng)
        target_gx = ndimage.correlate(to_gray(content), SOBEL_X, mode="nearest")
        target_gy = ndimage.correlate(to_gray(content), SOBEL_Y, mode="nearest")

        denoise_rate = min(0.9, 2.0 * strength / steps)
        edge_rate = 0.05 * strength / steps
        for _ in range(steps):
            denoised = np.stack(
                [ndimage.correlate(x[..., c], kernel, mode="nearest")
                 for c in range(3)], axis=-1)
            x = x + denoise_rate * (denoised - x)

            gray = to_gray(x)
            res_x = ndimage.correlate(gray, SOBEL_X, mode="nearest") - target_gx
            res_y = ndimage.correlate(gray, SOBEL_Y, mode="nearest") - target_gy
            pull = (ndimage.convolve(res_x, SOBEL_X, mode="nearest")
                    + ndimage.convolve(res_y, SOBEL_Y, mode="nearest"))
            x = x - edge_rate * pull[..., None] * LUMA[None, None, :]
            x = np.clip(x, 0.0, 1.0)
        save_image_unit(x, out_path)

    @staticmethod
    def _fit_denoiser(noisy: np.ndarray, clean: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
        """Least-squares 3x3 kernel mapping noisy neighborhoods to clean
        center pixels, shared across channels."""
        h, w, _ = noisy.shape
        padded = np.pad(noisy, ((1, 1), (1, 1), (0, 0)), mode="edge")
        n = min(4096, h * w)
        flat = rng.choice(h * w, size=n, replace=False)
        ys, xs = flat // w, flat % w
        columns = [padded[ys + dy, xs + dx] for dy in range(3) for dx in range(3)]
        design = np.stack(columns, axis=2).reshape(-1, 9)  # (n*3, 9)
        target = clean[ys, xs].reshape(-1)
        kernel, *_ = np.linalg.lstsq(design, target, rcond=None)
        return kernel.reshape(3, 3)


class ExternalRefineBackend:
    """Subprocess adapter: the executable is invoked with
    (content path, reference path, out path, seed) and must exit 0. Step and
    strength knobs stay with the external tool's own packaged defaults."""

    concurrency = "per_worker"

    def __init__(self, command: str):
        self.command = command
        self.backend_id = f"external-refiner:{Path(command).name}"

    def run(self, content_path: str, reference_path: str, out_path: str,
            steps: int, strength: float, seed: int) -> None:
        if shutil.which(self.command) is None and not Path(self.command).is_file():
            raise BackendUnavailable(f"refine backend {self.command!r} not found")
        proc = subprocess.run(
            [self.command, content_path, reference_path, out_path, str(seed)],
            capture_output=True, text=True,
        )
        if proc.returncode != 0:
            raise BackendUnavailable(
                f"refine backend {self.command!r} exited "
                f"{proc.returncode}: {proc.stderr.strip()[:500]}"
            )


def make_refine_backend(name: str, command: str | None = None) -> RefineBackend:
    if name == "stub":
        return StubRefineBackend()
    if name == "external":
        if not command:
            raise BackendUnavailable("external refine backend needs a command")
        return ExternalRefineBackend(command)
    raise BackendUnavailable(f"unknown refine backend {name!r}")


def refine(request: RefineRequest, backend: RefineBackend) -> RefineResult:
    """Produce the real-scene image and score its structural similarity to
    the content painting. Deterministic for a fixed seed and backend."""
    for label, path in (("content", request.content_image),
                        ("reference", request.reference_image)):
        if not Path(path).is_file():
            raise NotFound(f"{label} image {path} does not exist")
    content = load_image_unit(request.content_image)
    reference = load_image_unit(request.reference_image)
    if content.shape != reference.shape:
        raise ShapeError(
            f"content {content.shape} and reference {reference.shape} "
            "must have equal sizes"
        )

    Path(request.out_path).parent.mkdir(parents=True, exist_ok=True)
    backend.run(request.content_image, request.reference_image,
                request.out_path, request.steps, request.strength, request.seed)

    out = load_image_unit(request.out_path)
    if out.shape != content.shape:
        raise ShapeError(
            f"backend produced {out.shape}, expected {content.shape}"
        )
    score = structure_score(out, content)
    checksum = file_checksum(request.out_path)
    record = ImageRecord(
        id=record_id_for(Path(request.out_path).name, checksum),
        domain_tag="real_scene",
        path=str(request.out_path),
        width=out.shape[1],
        height=out.shape[0],
        checksum=checksum,
    )
    return RefineResult(real_scene=record, structure_score=score,
                        backend_id=backend.backend_id)
