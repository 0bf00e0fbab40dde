"""Joint image/text embedding backends and an on-disk embedding cache.

Embeddings are plain float64 numpy vectors, L2-normalized to unit length.
The stub backend is fully deterministic and dependency-free so the matching
math can be exercised without model weights; the CLIP adapter loads a real
model when its optional dependency is installed.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

from .corpus import ImageRecord
from .dictionary import Dictionary
from .errors import DecodeError, EncoderUnavailable

log = logging.getLogger(__name__)

CACHE_ENV_VAR = "P2D_CACHE"

NORM_TOLERANCE = 1e-6


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("cannot normalize zero or non-finite vector")
    return vec / norm


@runtime_checkable
class TextEncoder(Protocol):
    version: str
    dim: int

    def encode_text(self, prompt: str) -> np.ndarray: ...


@runtime_checkable
class ImageEncoder(Protocol):
    version: str
    dim: int

    def encode_image(self, path: str | Path) -> np.ndarray: ...


class StubJointEncoder:
    """Deterministic pseudo-encoder for both modalities.

    Text prompts map to unit vectors drawn from an RNG seeded by the prompt's
    sha256, so equal prompts always agree and distinct prompts are close to
    orthogonal at dim 64. Images are downsampled to 8x8 RGB and pushed through
    a fixed random projection, so visually similar images land near each other.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.seed = seed
        self.version = f"stub-{dim}-{seed}"
        rng = np.random.default_rng(np.random.SeedSequence([dim, seed, 0x70726F6A]))
        # 8x8 RGB patch -> dim; fixed for the encoder's lifetime.
        self._projection = rng.standard_normal((dim, 8 * 8 * 3))

    def encode_text(self, prompt: str) -> np.ndarray:
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        seed_words = [int.from_bytes(digest[i:i + 4], "big") for i in range(0, 16, 4)]
        rng = np.random.default_rng(np.random.SeedSequence([self.seed] + seed_words))
        return l2_normalize(rng.standard_normal(self.dim))

    def encode_image(self, path: str | Path) -> np.ndarray:
        try:
            with Image.open(path) as img:
                small = img.convert("RGB").resize((8, 8), Image.BILINEAR)
        except Exception as exc:
            raise DecodeError(f"cannot decode image {path}: {exc}") from exc
        flat = np.asarray(small, dtype=np.float64).reshape(-1) / 255.0
        return l2_normalize(self._projection @ (flat - flat.mean()))


class ClipEncoder:
    """Adapter around an open-CLIP style model (optional heavy dependency)."""

    def __init__(self, model_name: str = "ViT-B-32", pretrained: str = "laion2b_s34b_b79k"):
        try:
            import open_clip  # type: ignore
            import torch
        except ImportError as exc:
            raise EncoderUnavailable(
                f"open_clip is not installed: {exc}. Install open-clip-torch "
                "or use the stub encoder."
            ) from exc
        try:
            model, _, preprocess = open_clip.create_model_and_transforms(
                model_name, pretrained=pretrained
            )
            tokenizer = open_clip.get_tokenizer(model_name)
        except Exception as exc:
            raise EncoderUnavailable(
                f"failed to load CLIP model {model_name}/{pretrained}: {exc}"
            ) from exc
        self._torch = torch
        self._model = model.eval()
        self._preprocess = preprocess
        self._tokenizer = tokenizer
        self.version = f"clip-{model_name}-{pretrained}"
        self.dim = int(model.text_projection.shape[1]) if hasattr(
            model, "text_projection") else 512

    def encode_text(self, prompt: str) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            tokens = self._tokenizer([prompt])
            feats = self._model.encode_text(tokens)[0]
        return l2_normalize(feats.cpu().numpy().astype(np.float64))

    def encode_image(self, path: str | Path) -> np.ndarray:
        torch = self._torch
        try:
            with Image.open(path) as img:
                tensor = self._preprocess(img.convert("RGB")).unsqueeze(0)
        except OSError as exc:
            raise DecodeError(f"cannot decode image {path}: {exc}") from exc
        with torch.no_grad():
            feats = self._model.encode_image(tensor)[0]
        return l2_normalize(feats.cpu().numpy().astype(np.float64))


def make_encoder(name: str, dim: int = 64, seed: int = 0):
    """Encoder factory for CLI/pipeline config strings."""
    if name == "stub":
        return StubJointEncoder(dim=dim, seed=seed)
    if name == "clip":
        return ClipEncoder()
    raise EncoderUnavailable(f"unknown encoder {name!r} (expected 'stub' or 'clip')")


def _safe_token(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", text)


class EmbeddingCache:
    """Content-addressed store of image embeddings.

    Keyed by (file checksum, encoder version) so re-encodes are skipped across
    runs while edited files or new encoders miss cleanly. Writes go through a
    temp file and os.replace so readers never see partial arrays.
    """

    def __init__(self, root: str | Path | None = None):
        if root is None:
            root = os.environ.get(CACHE_ENV_VAR, "")
        if not root:
            raise ValueError(
                f"cache root not given and {CACHE_ENV_VAR} is not set"
            )
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _path(self, checksum: str, encoder_version: str) -> Path:
        return self.root / f"{_safe_token(checksum)}__{_safe_token(encoder_version)}.npy"

    def get(self, checksum: str, encoder_version: str) -> np.ndarray | None:
        path = self._path(checksum, encoder_version)
        if not path.is_file():
            with self._lock:
                self.misses += 1
            return None
        try:
            vec = np.load(path)
        except Exception as exc:
            log.warning("dropping unreadable cache entry %s: %s", path, exc)
            path.unlink(missing_ok=True)
            with self._lock:
                self.misses += 1
            return None
        with self._lock:
            self.hits += 1
        return np.asarray(vec, dtype=np.float64)

    def put(self, checksum: str, encoder_version: str, vec: np.ndarray) -> None:
        path = self._path(checksum, encoder_version)
        tmp = path.with_name(f".tmp-{os.getpid()}-{threading.get_ident()}-{path.name}")
        with self._lock:
            with open(tmp, "wb") as fh:
                np.save(fh, np.asarray(vec, dtype=np.float64))
            os.replace(tmp, path)

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses}


def encode_image_record(
    record: ImageRecord,
    encoder: ImageEncoder,
    cache: EmbeddingCache | None = None,
) -> np.ndarray:
    """Embed one image, consulting the cache by (checksum, encoder version)."""
    if cache is not None:
        cached = cache.get(record.checksum, encoder.version)
        if cached is not None:
            return cached
    vec = encoder.encode_image(record.path)
    vec = l2_normalize(vec)
    if cache is not None:
        cache.put(record.checksum, encoder.version, vec)
    return vec


def encode_dictionary(dictionary: Dictionary, encoder: TextEncoder) -> np.ndarray:
    """Embed every dictionary prompt; rows align with dictionary.entries."""
    rows = []
    for entry in dictionary.entries:
        try:
            vec = encoder.encode_text(entry.prompt)
        except EncoderUnavailable:
            raise
        except Exception as exc:
            raise EncoderUnavailable(
                f"text backend failed on prompt {entry.prompt!r}: {exc}"
            ) from exc
        rows.append(l2_normalize(vec))
    return np.stack(rows, axis=0)
