"""Hierarchical vocabulary of binary descriptors with tf-idf weighting."""

import logging
from typing import Dict, List

import numpy as np

from ..exceptions import InvalidArgumentException

logger = logging.getLogger(__name__)

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


def hamming_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between two sets of packed binary descriptors.

    Arguments:
        a: ``(N, 32)`` uint8 descriptors.
        b: ``(M, 32)`` uint8 descriptors.

    Returns:
        An ``(N, M)`` integer matrix.
    """
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int64)
    return _POPCOUNT[a[:, None, :] ^ b[None, :, :]].sum(axis=2).astype(np.int64)


def _majority(descriptors: np.ndarray) -> np.ndarray:
    """Bitwise majority vote, the median of binary vectors."""
    bits = np.unpackbits(descriptors, axis=1)
    return np.packbits(bits.mean(axis=0) > 0.5)


class Vocabulary:
    """A tree of binary words built with k-medians clustering.

    Leaves are the visual words. Each word has an inverse document frequency
    weight computed from the training keyframes.
    """

    branching: int
    depth: int

    def __init__(self, branching: int = 10, depth: int = 3):
        if branching < 2 or depth < 1:
            raise InvalidArgumentException("Vocabulary needs a branching factor ≥ 2 and depth ≥ 1.")
        self.branching = branching
        self.depth = depth
        self._centers: List[np.ndarray] = []
        self._children: List[List[int]] = []
        self._word_of_node: Dict[int, int] = {}
        self.weights = np.zeros(0)

    @property
    def size(self) -> int:
        return len(self._word_of_node)

    def _new_node(self, center: np.ndarray) -> int:
        self._centers.append(center)
        self._children.append([])
        return len(self._centers) - 1

    def _kmedians(self, descriptors: np.ndarray, rng: np.random.Generator, iterations: int = 8):
        k = self.branching
        # k-means++ seeding on Hamming distances
        centers = [descriptors[rng.integers(len(descriptors))]]
        for _ in range(1, k):
            d = hamming_distances(descriptors, np.stack(centers)).min(axis=1).astype(float)
            if d.sum() == 0:
                break
            centers.append(descriptors[rng.choice(len(descriptors), p=d * d / np.sum(d * d))])
        centers = np.stack(centers)
        for _ in range(iterations):
            labels = hamming_distances(descriptors, centers).argmin(axis=1)
            updated = np.stack(
                [
                    _majority(descriptors[labels == i]) if np.any(labels == i) else centers[i]
                    for i in range(len(centers))
                ]
            )
            if np.array_equal(updated, centers):
                break
            centers = updated
        labels = hamming_distances(descriptors, centers).argmin(axis=1)
        return centers, labels

    def train(self, documents: List[np.ndarray], seed: int = 0) -> "Vocabulary":
        """Build the tree from the descriptor sets of many keyframes."""
        rng = np.random.default_rng(seed)
        descriptors = np.concatenate([d for d in documents if len(d)])
        self._centers, self._children, self._word_of_node = [], [], {}
        root = self._new_node(_majority(descriptors))
        stack = [(root, descriptors, 0)]
        while stack:
            node, data, level = stack.pop()
            if level == self.depth or len(data) <= self.branching:
                self._word_of_node[node] = len(self._word_of_node)
                continue
            centers, labels = self._kmedians(data, rng)
            for i, center in enumerate(centers):
                child = self._new_node(center)
                self._children[node].append(child)
                stack.append((child, data[labels == i], level + 1))

        counts = np.zeros(self.size)
        for document in documents:
            if len(document):
                counts[np.unique(self.words(document))] += 1
        self.weights = np.log(max(len(documents), 1) / np.maximum(counts, 1.0))
        logger.info("Trained vocabulary with %d words from %d keyframes", self.size, len(documents))
        return self

    def words(self, descriptors: np.ndarray) -> np.ndarray:
        """Leaf word index of each descriptor."""
        result = np.empty(len(descriptors), dtype=np.int64)
        for i, descriptor in enumerate(descriptors):
            node = 0
            while self._children[node]:
                children = self._children[node]
                d = hamming_distances(descriptor[None, :], np.stack([self._centers[c] for c in children]))
                node = children[int(d.argmin())]
            result[i] = self._word_of_node[node]
        return result

    def transform(self, descriptors: np.ndarray) -> Dict[int, float]:
        """L1-normalized tf-idf bag-of-words vector as a sparse mapping."""
        if len(descriptors) == 0:
            return {}
        words, counts = np.unique(self.words(descriptors), return_counts=True)
        values = counts / counts.sum() * self.weights[words]
        norm = np.abs(values).sum()
        if norm == 0:
            values = np.full(len(words), 1.0 / len(words))
        else:
            values = values / norm
        return dict(zip(words.tolist(), values.tolist()))

    @staticmethod
    def score(a: Dict[int, float], b: Dict[int, float]) -> float:
        """L1 similarity ``1 - ½‖a - b‖₁`` of two normalized vectors, in [0, 1]."""
        shared = a.keys() & b.keys()
        # |a-b|₁ = |a|₁ + |b|₁ + Σ_shared (|a_i - b_i| - |a_i| - |b_i|)
        overlap = sum(abs(a[w]) + abs(b[w]) - abs(a[w] - b[w]) for w in shared)
        return 0.5 * overlap
