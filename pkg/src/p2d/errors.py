"""Exception types shared across the pipeline."""


class P2DError(Exception):
    """Base class for all errors raised by this package."""


# --- corpus / manifests -----------------------------------------------------

class EmptyCorpus(P2DError):
    """Ingestion found no decodable images."""


class IncompatibleManifest(P2DError):
    """Manifest file has an unknown schema version or is malformed."""


class NotFound(P2DError):
    """A referenced file, record, or resource does not exist."""


class DuplicateEntry(P2DError):
    """An id or key that must be unique appeared twice."""


# --- dictionary / encoders / matching ---------------------------------------

class DictionaryEmpty(P2DError):
    """Dictionary has no entries."""


class EncoderUnavailable(P2DError):
    """Embedding backend could not be loaded or failed; carries diagnostics."""


class DecodeError(P2DError):
    """An image file exists but could not be decoded."""


class DimensionError(P2DError):
    """Embedding or profile dimensions do not line up."""


class InsufficientCandidates(P2DError):
    """Fewer candidate photos than the requested K."""


class InvalidK(P2DError):
    """K must be a positive integer."""


# --- translation training ---------------------------------------------------

class EmptyBatch(P2DError):
    """A loss was asked to evaluate a batch with zero images."""


class ShapeError(P2DError):
    """Tensor or image shapes are incompatible."""


class DivergedTraining(P2DError):
    """Training produced a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, last_good_checkpoint: str | None = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class NoCheckpoint(P2DError):
    """No checkpoint exists at the requested location."""


# --- refinement / depth ------------------------------------------------------

class BackendUnavailable(P2DError):
    """An external refine/depth backend is missing or failed; carries diagnostics."""


class WindowError(P2DError):
    """Image too small for the sliding-window structural score."""


class NotNormalized(P2DError):
    """Operation requires a normalized depth map."""


class TooSmall(P2DError):
    """Depth map too small to produce a solid mesh."""


# --- study -------------------------------------------------------------------

class NotEnoughMaterial(P2DError):
    """Run does not contain enough finished items to build a study."""


class OutOfOrder(P2DError):
    """Response submitted for a question that is not the session's current one."""


class DuplicateResponse(P2DError):
    """This session already answered that question."""


class InvalidRating(P2DError):
    """Rating outside the 1..5 integer scale."""


class InvalidChoice(P2DError):
    """Identification answer is not one of the offered candidates."""


class NoData(P2DError):
    """Aggregate requested before any complete session exists."""
