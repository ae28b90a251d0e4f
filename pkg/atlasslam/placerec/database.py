import logging
from enum import Enum
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Set, Tuple

import numpy as np

from .vocabulary import Vocabulary, hamming_distances

if TYPE_CHECKING:
    from ..models import Keyframe

logger = logging.getLogger(__name__)

__all__ = ["KeyframeDatabase", "DatabaseMode", "hamming_distances"]


class DatabaseMode(str, Enum):
    BRUTE_FORCE = "brute-force"
    VOCABULARY = "vocabulary"


class KeyframeDatabase:
    """Descriptor index over the keyframes of every map of an atlas.

    Small databases compare descriptor sets exhaustively; once more than
    ``vocabulary_threshold`` keyframes are stored a hierarchical vocabulary
    is trained and queries go through an inverted index.
    """

    def __init__(
        self,
        vocabulary_threshold: int = 500,
        branching: int = 10,
        depth: int = 3,
        seed: int = 0,
    ):
        self.vocabulary_threshold = vocabulary_threshold
        self.branching = branching
        self.depth = depth
        self.seed = seed
        self._descriptors: Dict[int, np.ndarray] = {}
        self._maps: Dict[int, Optional[int]] = {}
        self.vocabulary: Optional[Vocabulary] = None
        self._vectors: Dict[int, Dict[int, float]] = {}
        self._inverted: Dict[int, Set[int]] = {}

    @property
    def mode(self) -> DatabaseMode:
        return DatabaseMode.BRUTE_FORCE if self.vocabulary is None else DatabaseMode.VOCABULARY

    def __len__(self) -> int:
        return len(self._descriptors)

    def __contains__(self, keyframe_id: int) -> bool:
        return keyframe_id in self._descriptors

    def ids(self) -> Set[int]:
        return set(self._descriptors)

    def _index(self, keyframe_id: int):
        vector = self.vocabulary.transform(self._descriptors[keyframe_id])
        self._vectors[keyframe_id] = vector
        for word in vector:
            self._inverted.setdefault(word, set()).add(keyframe_id)

    def _train(self):
        ids = sorted(self._descriptors)
        self.vocabulary = Vocabulary(self.branching, self.depth).train(
            [self._descriptors[i] for i in ids], seed=self.seed
        )
        self._vectors, self._inverted = {}, {}
        for keyframe_id in ids:
            self._index(keyframe_id)

    def add(self, keyframe: "Keyframe"):
        self._descriptors[keyframe.id] = keyframe.descriptors()
        self._maps[keyframe.id] = keyframe.map_id
        if self.vocabulary is not None:
            self._index(keyframe.id)
        elif len(self._descriptors) > self.vocabulary_threshold:
            logger.info("Keyframe database above %d entries, switching to a vocabulary", self.vocabulary_threshold)
            self._train()

    def remove(self, keyframe_id: int):
        self._descriptors.pop(keyframe_id, None)
        self._maps.pop(keyframe_id, None)
        for word in self._vectors.pop(keyframe_id, {}):
            self._inverted.get(word, set()).discard(keyframe_id)

    def set_map(self, keyframe_ids: Iterable[int], map_id: int):
        for keyframe_id in keyframe_ids:
            if keyframe_id in self._maps:
                self._maps[keyframe_id] = map_id

    def _brute_force_scores(self, descriptors: np.ndarray, candidates: Iterable[int]) -> Dict[int, float]:
        scores = {}
        for keyframe_id in candidates:
            stored = self._descriptors[keyframe_id]
            if len(stored) == 0 or len(descriptors) == 0:
                continue
            # mean of the closest distances, mapped to a similarity in [0, 1]
            closest = hamming_distances(descriptors, stored).min(axis=1)
            scores[keyframe_id] = 1.0 - float(closest.mean()) / 256.0
        return scores

    def _vocabulary_scores(self, descriptors: np.ndarray, candidates: Set[int]) -> Dict[int, float]:
        query = self.vocabulary.transform(descriptors)
        sharing: Set[int] = set()
        for word in query:
            sharing |= self._inverted.get(word, set())
        return {
            keyframe_id: Vocabulary.score(query, self._vectors[keyframe_id])
            for keyframe_id in sharing & candidates
        }

    def query(
        self,
        descriptors: np.ndarray,
        count: int = 3,
        exclude: Iterable[int] = (),
        map_ids: Iterable[int] = None,
    ) -> List[Tuple[int, float]]:
        """Most similar stored keyframes to a descriptor set.

        Arguments:
            descriptors: ``(N, 32)`` descriptors of the query.
            count: Maximum number of results.
            exclude: Keyframe ids never returned.
            map_ids: Restrict results to these maps.

        Returns:
            ``(keyframe id, similarity)`` pairs, most similar first.
        """
        excluded = set(exclude)
        allowed = None if map_ids is None else set(map_ids)
        candidates = {
            kf
            for kf in self._descriptors
            if kf not in excluded and (allowed is None or self._maps.get(kf) in allowed)
        }
        if self.vocabulary is None:
            scores = self._brute_force_scores(descriptors, sorted(candidates))
        else:
            scores = self._vocabulary_scores(descriptors, candidates)
        ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
        return ranked[:count]

    def query_candidates(self, keyframe: "Keyframe", count: int = 3) -> List[int]:
        """Place-recognition candidates, excluding the keyframe and its covisibles."""
        exclude = {keyframe.id} | set(keyframe.covisibility)
        return [kf for kf, _ in self.query(keyframe.descriptors(), count, exclude)]

    def relocalization_candidates(self, descriptors: np.ndarray, count: int = 3) -> List[int]:
        """Candidates for a frame that is not part of any map."""
        return [kf for kf, _ in self.query(descriptors, count)]

    def __repr__(self) -> str:
        return f"<KeyframeDatabase {self.mode.value} keyframes={len(self)}>"
