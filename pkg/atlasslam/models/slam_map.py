import logging
from collections import Counter
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Set, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .common import ModelBase
from .keyframe import Keyframe
from .mappoint import MapPoint
from ..config import MapConfig
from ..exceptions import (
    DuplicateIdException,
    MapIntegrityException,
    PreconditionException,
    SamePointException,
)
from ..manifold import SimTransform

if TYPE_CHECKING:
    from ..placerec.database import KeyframeDatabase

logger = logging.getLogger(__name__)

Edge = Tuple[int, int]


def _edge(a: int, b: int) -> Edge:
    return (a, b) if a < b else (b, a)


class SlamMap(ModelBase):
    """A set of keyframes and map points sharing one reference frame."""

    keyframes: Dict[int, Keyframe]
    """Keyframes by id, in insertion order."""

    points: Dict[int, MapPoint]
    """Map points by id."""

    inertial: bool
    """True if the map is built with IMU measurements."""

    imu_initialized: bool
    """True once scale, gravity and biases have been estimated."""

    mature: bool
    """True once the inertial parameters are considered accurate."""

    imu_init_time: Optional[float]
    """Timestamp of the IMU initialization."""

    root_id: Optional[int]
    """First keyframe of the map, root of the spanning tree."""

    last_id: Optional[int]
    """Most recently inserted keyframe."""

    def __init__(
        self,
        id: int,
        inertial: bool = False,
        config: MapConfig = None,
        database: "KeyframeDatabase" = None,
    ):
        super().__init__(id)
        self.keyframes = {}
        self.points = {}
        self.inertial = inertial
        self.imu_initialized = False
        self.mature = False
        self.imu_init_time = None
        self.root_id = None
        self.last_id = None
        self.vi_ba_stage = 0
        self.last_scale_refine_time = None
        self.config = config or MapConfig()
        self.database = database

    def __contains__(self, keyframe_id: int) -> bool:
        return keyframe_id in self.keyframes

    def __len__(self) -> int:
        return len(self.keyframes)

    def ordered_keyframes(self) -> List[Keyframe]:
        return sorted(self.keyframes.values(), key=lambda kf: (kf.timestamp, kf.id))

    def add_point(self, point: MapPoint) -> MapPoint:
        if point.id in self.points:
            raise DuplicateIdException("Map point id already in use.", {"point": point.id})
        self.points[point.id] = point
        return point

    def add_observation(self, point_id: int, keyframe_id: int, index: int, update: bool = True):
        """Associate a keypoint of a keyframe with a map point."""
        keyframe = self.keyframes[keyframe_id]
        previous = keyframe.points.get(index)
        if previous is not None and previous != point_id and previous in self.points:
            self.points[previous].observations.discard((keyframe_id, index))
        keyframe.points[index] = point_id
        self.points[point_id].observations.add((keyframe_id, index))
        if update:
            self.update_connections(keyframe_id)

    def remove_observation(self, point_id: int, keyframe_id: int, index: int, update: bool = True):
        keyframe = self.keyframes[keyframe_id]
        if keyframe.points.get(index) == point_id:
            del keyframe.points[index]
        point = self.points[point_id]
        point.observations.discard((keyframe_id, index))
        if update:
            self.update_connections(keyframe_id)

    def update_connections(self, keyframe_id: int):
        """Recompute the covisibility weights of a keyframe and its neighbours."""
        keyframe = self.keyframes[keyframe_id]
        counts: Counter = Counter()
        for point_id in keyframe.point_ids():
            point = self.points.get(point_id)
            if point is None:
                continue
            for other in point.observers():
                if other != keyframe_id and other in self.keyframes:
                    counts[other] += 1

        for other in set(keyframe.covisibility) - set(counts):
            self.keyframes[other].covisibility.pop(keyframe_id, None)
        keyframe.covisibility = dict(counts)
        for other, weight in counts.items():
            self.keyframes[other].covisibility[keyframe_id] = weight

    def insert_keyframe(self, keyframe: Keyframe) -> Keyframe:
        """Add a keyframe whose :attr:`Keyframe.points` reference existing map points.

        The covisibility graph is updated, the spanning tree is extended to the
        existing keyframe sharing most points (or the last keyframe if none is
        covisible) and the keyframe is registered in the place-recognition
        database.

        Raises:
            DuplicateIdException: If the id is already used by this map.
            PreconditionException: If an observed map point does not exist.
        """
        if keyframe.id in self.keyframes:
            raise DuplicateIdException("Keyframe id already in use.", {"keyframe": keyframe.id})
        missing = sorted(pid for pid in keyframe.point_ids() if pid not in self.points)
        if missing:
            raise PreconditionException(
                "Keyframe observes unknown map points.", {"points": missing[:10]}
            )

        keyframe.map_id = self.id
        self.keyframes[keyframe.id] = keyframe
        for index, point_id in keyframe.points.items():
            self.points[point_id].observations.add((keyframe.id, index))

        if self.inertial and self.last_id is not None:
            last = self.keyframes[self.last_id]
            keyframe.previous_id = last.id
            last.next_id = keyframe.id

        self.update_connections(keyframe.id)
        if self.root_id is None:
            self.root_id = keyframe.id
            keyframe.parent_id = None
        else:
            best = keyframe.best_covisibles(1)
            parent = best[0] if best else self.last_id
            keyframe.parent_id = parent
            self.keyframes[parent].children.add(keyframe.id)
        self.last_id = keyframe.id

        if self.database is not None:
            self.database.add(keyframe)
        logger.debug("Map %d: inserted %r", self.id, keyframe)
        return keyframe

    def erase_point(self, point_id: int):
        point = self.points.pop(point_id)
        for keyframe_id, index in point.observations:
            keyframe = self.keyframes.get(keyframe_id)
            if keyframe is not None and keyframe.points.get(index) == point_id:
                del keyframe.points[index]
        for keyframe_id in point.observers():
            if keyframe_id in self.keyframes:
                self.update_connections(keyframe_id)

    def fuse_points(self, keep_id: int, remove_id: int):
        """Replace a duplicate point by another, keeping all observations.

        Raises:
            SamePointException: If both ids are equal.
            PreconditionException: If one of the points does not exist.
        """
        if keep_id == remove_id:
            raise SamePointException("Cannot fuse a point with itself.", {"point": keep_id})
        if keep_id not in self.points or remove_id not in self.points:
            raise PreconditionException(
                "Both points must belong to the map.", {"keep": keep_id, "remove": remove_id}
            )
        keep = self.points[keep_id]
        remove = self.points.pop(remove_id)
        for keyframe_id, index in remove.observations:
            self.keyframes[keyframe_id].points[index] = keep_id
            keep.observations.add((keyframe_id, index))
        for keyframe_id in keep.observers():
            self.update_connections(keyframe_id)
        keep.update_descriptor(self.keyframes)

    def erase_keyframe(self, keyframe_id: int):
        """Remove a keyframe, repairing the graphs it takes part in.

        Children in the spanning tree are attached to the parent of the erased
        keyframe. In inertial maps the preintegrated measurements on both sides
        are concatenated so the temporal chain stays continuous.

        Raises:
            PreconditionException: For the root of a map that has other keyframes.
        """
        keyframe = self.keyframes[keyframe_id]
        if keyframe_id == self.root_id and len(self.keyframes) > 1:
            raise PreconditionException("The root keyframe cannot be erased.", {"keyframe": keyframe_id})

        previous = self.keyframes.get(keyframe.previous_id)
        following = self.keyframes.get(keyframe.next_id)
        if following is not None:
            if keyframe.preintegrated is not None and following.preintegrated is not None:
                later = following.preintegrated
                if not np.array_equal(later.bias, keyframe.preintegrated.bias):
                    later = later.reintegrate(keyframe.preintegrated.bias)
                following.preintegrated = keyframe.preintegrated.merge(later)
            else:
                following.preintegrated = None
            following.previous_id = previous.id if previous is not None else None
        if previous is not None:
            previous.next_id = following.id if following is not None else None
        if self.last_id == keyframe_id:
            self.last_id = previous.id if previous is not None else None

        neighbours = set(keyframe.covisibility)
        orphans: Set[int] = set()
        for index, point_id in list(keyframe.points.items()):
            point = self.points.get(point_id)
            if point is None:
                continue
            point.observations.discard((keyframe_id, index))
            if not point.observations:
                orphans.add(point_id)
            elif point.reference_id == keyframe_id:
                point.reference_id = min(point.observers())
        for point_id in orphans:
            del self.points[point_id]

        parent = self.keyframes.get(keyframe.parent_id)
        if parent is not None:
            parent.children.discard(keyframe_id)
            for child in keyframe.children:
                self.keyframes[child].parent_id = parent.id
                parent.children.add(child)
        for other in keyframe.loop_ids:
            if other in self.keyframes:
                self.keyframes[other].loop_ids.discard(keyframe_id)
        for other in neighbours:
            self.keyframes[other].covisibility.pop(keyframe_id, None)

        del self.keyframes[keyframe_id]
        if not self.keyframes:
            self.root_id = None
        for other in neighbours:
            self.update_connections(other)
        if self.database is not None:
            self.database.remove(keyframe_id)
        logger.debug("Map %d: erased keyframe %d", self.id, keyframe_id)

    def add_loop_edge(self, a: int, b: int):
        self.keyframes[a].loop_ids.add(b)
        self.keyframes[b].loop_ids.add(a)

    def essential_edges(self) -> Set[Edge]:
        """Spanning tree, strong covisibility and loop edges."""
        edges = set()
        threshold = self.config.strong_covisibility
        for keyframe in self.keyframes.values():
            if keyframe.parent_id is not None:
                edges.add(_edge(keyframe.id, keyframe.parent_id))
            for other, weight in keyframe.covisibility.items():
                if weight >= threshold:
                    edges.add(_edge(keyframe.id, other))
            for other in keyframe.loop_ids:
                edges.add(_edge(keyframe.id, other))
        return edges

    def is_connected(self, edges: Iterable[Edge] = None) -> bool:
        """True if the keyframes form a single component over the given edges."""
        ids = list(self.keyframes)
        if len(ids) <= 1:
            return True
        index = {kf: i for i, kf in enumerate(ids)}
        edges = list(self.essential_edges() if edges is None else edges)
        rows = [index[a] for a, _ in edges]
        cols = [index[b] for _, b in edges]
        adjacency = coo_matrix((np.ones(len(edges)), (rows, cols)), shape=(len(ids), len(ids)))
        count, _ = connected_components(adjacency, directed=False)
        return count == 1

    def transform(self, transform: SimTransform, keyframe_ids: Iterable[int] = None, point_ids: Iterable[int] = None):
        """Move keyframes and points into another reference frame.

        Camera centres and points follow the similarity, bodies keep their
        metric offset from the first camera. Velocities are rotated and scaled
        with the frame.
        """
        keyframe_ids = self.keyframes if keyframe_ids is None else keyframe_ids
        point_ids = self.points if point_ids is None else point_ids
        for keyframe_id in keyframe_ids:
            keyframe = self.keyframes[keyframe_id]
            state = keyframe.state
            state.pose = transform.transform_pose(state.pose, keyframe.rig.extrinsics[0])
            state.velocity = transform.scale * (transform.rotation @ state.velocity)
        for point_id in point_ids:
            point = self.points[point_id]
            point.position = transform.act(point.position)

    def validate(self):
        """Check referential integrity and graph invariants of the whole map.

        Raises:
            MapIntegrityException: On the first violated invariant.
        """
        for point in self.points.values():
            for keyframe_id, index in point.observations:
                keyframe = self.keyframes.get(keyframe_id)
                if keyframe is None or keyframe.points.get(index) != point.id:
                    raise MapIntegrityException(
                        "Point observation is not mirrored by its keyframe.",
                        {"point": point.id, "keyframe": keyframe_id, "index": index},
                    )

        roots = []
        for keyframe in self.keyframes.values():
            if keyframe.map_id != self.id:
                raise MapIntegrityException("Keyframe belongs to another map.", {"keyframe": keyframe.id})
            for index, point_id in keyframe.points.items():
                point = self.points.get(point_id)
                if point is None or (keyframe.id, index) not in point.observations:
                    raise MapIntegrityException(
                        "Keyframe observation is not mirrored by its point.",
                        {"keyframe": keyframe.id, "point": point_id, "index": index},
                    )
            expected: Counter = Counter()
            for point_id in keyframe.point_ids():
                for other in self.points[point_id].observers():
                    if other != keyframe.id:
                        expected[other] += 1
            if dict(expected) != keyframe.covisibility:
                raise MapIntegrityException("Stale covisibility weights.", {"keyframe": keyframe.id})
            for other, weight in keyframe.covisibility.items():
                if self.keyframes[other].covisibility.get(keyframe.id) != weight:
                    raise MapIntegrityException(
                        "Covisibility is not symmetric.", {"keyframe": keyframe.id, "other": other}
                    )
            if keyframe.parent_id is None:
                roots.append(keyframe.id)
            elif keyframe.parent_id not in self.keyframes or keyframe.id not in self.keyframes[keyframe.parent_id].children:
                raise MapIntegrityException("Broken spanning tree.", {"keyframe": keyframe.id})

        if self.keyframes and roots != [self.root_id]:
            raise MapIntegrityException("Spanning tree must have exactly one root.", {"roots": roots})
        if not self.is_connected():
            raise MapIntegrityException("Essential graph is disconnected.", {"map": self.id})
        if self.mature and not self.imu_initialized:
            raise MapIntegrityException("A mature map must have initialized inertial parameters.")

    def __repr__(self) -> str:
        flags = " inertial" if self.inertial else ""
        flags += " mature" if self.mature else ""
        return f"<SlamMap {self.id} keyframes={len(self.keyframes)} points={len(self.points)}{flags}>"
