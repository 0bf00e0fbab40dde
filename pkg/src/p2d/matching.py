"""Dictionary-based semantic matching between paintings and photos.

Every image gets a semantic profile: softmax over its cosine similarities to
the dictionary prompt embeddings. Paintings are then matched 1-to-K against
the photo corpus by cosine similarity between profiles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import DatasetManifest, MatchPair
from .dictionary import Dictionary
from .encoders import (
    EmbeddingCache,
    ImageEncoder,
    TextEncoder,
    encode_dictionary,
    encode_image_record,
    l2_normalize,
)
from .errors import (
    DimensionError,
    DuplicateEntry,
    InsufficientCandidates,
    InvalidK,
)

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.07

SUPPORTED_K = (1, 3, 5, 10)


@dataclass(frozen=True)
class SemanticProfile:
    """Distribution over dictionary entries describing one image."""

    image_id: str
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise DimensionError("profile weights must be a 1-D vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("profile weights must be finite and non-negative")
        if abs(float(w.sum()) - 1.0) > 1e-6:
            raise ValueError("profile weights must sum to 1")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class MatchResult:
    painting_id: str
    matches: tuple[tuple[str, float], ...]  # (photo_id, score), best first


def semantic_profile(
    image_embedding: np.ndarray,
    prompt_embeddings: np.ndarray,
    temperature: float = DEFAULT_TEMPERATURE,
    image_id: str = "",
) -> SemanticProfile:
    """Softmax of cosine(image, prompt) / temperature over dictionary entries."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    image_embedding = np.asarray(image_embedding, dtype=np.float64)
    prompt_embeddings = np.asarray(prompt_embeddings, dtype=np.float64)
    if prompt_embeddings.ndim != 2:
        raise DimensionError("prompt_embeddings must be (n_entries, dim)")
    if image_embedding.ndim != 1 or image_embedding.shape[0] != prompt_embeddings.shape[1]:
        raise DimensionError(
            f"embedding dim {image_embedding.shape} does not match prompts "
            f"{prompt_embeddings.shape}"
        )
    img = l2_normalize(image_embedding)
    prompts = prompt_embeddings / np.linalg.norm(prompt_embeddings, axis=1, keepdims=True)
    logits = (prompts @ img) / temperature
    logits -= logits.max()  # shift for overflow safety; softmax is invariant
    exp = np.exp(logits)
    return SemanticProfile(image_id=image_id, weights=exp / exp.sum())


def profile_similarity(a: SemanticProfile, b: SemanticProfile) -> float:
    """Cosine similarity between two profiles' weight vectors."""
    if a.weights.shape != b.weights.shape:
        raise DimensionError(
            f"profile lengths differ: {a.weights.shape} vs {b.weights.shape}"
        )
    return float(np.dot(l2_normalize(a.weights), l2_normalize(b.weights)))


def match_top_k(
    painting_profile: SemanticProfile,
    photo_profiles: Sequence[SemanticProfile],
    k: int,
) -> MatchResult:
    """Rank photos by profile cosine and keep the best K.

    Scores are non-increasing; exact ties are broken by ascending photo_id so
    results are deterministic across runs and platforms.
    """
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise InvalidK(f"k must be a positive integer, got {k!r}")
    if len(photo_profiles) < k:
        raise InsufficientCandidates(
            f"need at least {k} candidate photos, have {len(photo_profiles)}"
        )
    ids = [p.image_id for p in photo_profiles]
    if len(set(ids)) != len(ids):
        raise DuplicateEntry("photo profiles contain duplicate image ids")

    painting_vec = l2_normalize(painting_profile.weights)
    photo_mat = np.stack([p.weights for p in photo_profiles], axis=0)
    photo_mat = photo_mat / np.linalg.norm(photo_mat, axis=1, keepdims=True)
    scores = photo_mat @ painting_vec

    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    top = tuple((ids[i], float(scores[i])) for i in order[:k])
    return MatchResult(painting_id=painting_profile.image_id, matches=top)


def profile_manifest(
    manifest: DatasetManifest,
    domain_tag: str,
    dictionary: Dictionary,
    text_encoder: TextEncoder,
    image_encoder: ImageEncoder,
    temperature: float = DEFAULT_TEMPERATURE,
    cache: EmbeddingCache | None = None,
) -> list[SemanticProfile]:
    """Semantic profiles for every record of one domain in a manifest."""
    prompt_embeddings = encode_dictionary(dictionary, text_encoder)
    profiles: list[SemanticProfile] = []
    for record in manifest.by_domain(domain_tag):
        vec = encode_image_record(record, image_encoder, cache=cache)
        profiles.append(semantic_profile(
            vec, prompt_embeddings, temperature=temperature, image_id=record.id,
        ))
    return profiles


def build_matched_dataset(
    paintings: DatasetManifest,
    photos: DatasetManifest,
    dictionary: Dictionary,
    k: int,
    text_encoder: TextEncoder,
    image_encoder: ImageEncoder,
    temperature: float = DEFAULT_TEMPERATURE,
    cache: EmbeddingCache | None = None,
) -> DatasetManifest:
    """Pair every painting with its top-K photos and emit a training manifest.

    The result holds all painting records, the union of matched photo records
    (a subset of the photo manifest), and exactly K pairs per painting with
    ranks 1..K.
    """
    if k not in SUPPORTED_K:
        log.warning("k=%d is outside the usual sweep %s", k, SUPPORTED_K)
    prompt_embeddings = encode_dictionary(dictionary, text_encoder)

    def profiles_for(manifest: DatasetManifest, domain: str) -> list[SemanticProfile]:
        out = []
        for record in manifest.by_domain(domain):
            vec = encode_image_record(record, image_encoder, cache=cache)
            out.append(semantic_profile(
                vec, prompt_embeddings, temperature=temperature, image_id=record.id,
            ))
        return out

    painting_profiles = profiles_for(paintings, "painting")
    photo_profiles = profiles_for(photos, "photo")

    pairs: list[MatchPair] = []
    matched_photo_ids: set[str] = set()
    for prof in painting_profiles:
        result = match_top_k(prof, photo_profiles, k)
        for rank, (photo_id, score) in enumerate(result.matches, start=1):
            pairs.append(MatchPair(prof.image_id, photo_id, rank, score))
            matched_photo_ids.add(photo_id)

    photo_records = [r for r in photos.by_domain("photo") if r.id in matched_photo_ids]
    painting_records = paintings.by_domain("painting")
    return DatasetManifest(
        name=f"{paintings.name}+{photos.name}-k{k}",
        records=painting_records + photo_records,
        pairs=pairs,
        provenance_note=(
            f"matched k={k} temperature={temperature} dictionary={dictionary.version} "
            f"from {paintings.name} and {photos.name}"
        ),
    )
