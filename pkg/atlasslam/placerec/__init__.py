"""Keyframe database and place recognition."""

from .vocabulary import Vocabulary, hamming_distances
from .database import DatabaseMode, KeyframeDatabase
from .recognition import (
    LocalWindow,
    PlaceHypothesis,
    PlaceRecognizer,
    PutativeMatch,
    TemporalConsistencyBaseline,
    VerificationState,
    Verifier,
    build_local_window,
    count_verified_matches,
    gravity_check,
    guided_refine,
    horn_align,
    match_descriptors,
    putative_matches,
    ransac_align,
    search_by_projection,
    verify,
)
