import logging
from typing import Dict, Iterator, List, Optional

from .keyframe import Keyframe
from .slam_map import SlamMap
from ..config import MapConfig, PlaceRecConfig
from ..const import YOUNG_MAP_SECONDS
from ..exceptions import DuplicateIdException, MapIntegrityException, PreconditionException
from ..placerec.database import KeyframeDatabase

logger = logging.getLogger(__name__)


class Atlas:
    """A set of disconnected maps, one of them active, sharing a keyframe database."""

    maps: Dict[int, SlamMap]
    """All maps by id."""

    active_id: Optional[int]
    """Id of the active map, ``None`` only before the first map is created."""

    database: KeyframeDatabase
    """Place-recognition index over the keyframes of every map."""

    def __init__(
        self,
        config: MapConfig = None,
        placerec: PlaceRecConfig = None,
        seed: int = 0,
    ):
        self.config = config or MapConfig()
        placerec = placerec or PlaceRecConfig()
        self.maps = {}
        self.active_id = None
        self.database = KeyframeDatabase(
            placerec.vocabulary_threshold,
            placerec.vocabulary_branching,
            placerec.vocabulary_depth,
            seed,
        )
        self._next_map_id = 0
        self._next_keyframe_id = 0
        self._next_point_id = 0

    @property
    def active(self) -> SlamMap:
        if self.active_id is None:
            raise PreconditionException("The atlas has no active map.")
        return self.maps[self.active_id]

    def new_keyframe_id(self) -> int:
        self._next_keyframe_id += 1
        return self._next_keyframe_id - 1

    def new_point_id(self) -> int:
        self._next_point_id += 1
        return self._next_point_id - 1

    def reserve_ids(self, keyframe_id: int = -1, point_id: int = -1, map_id: int = -1):
        """Make sure future ids do not collide with externally created ones."""
        self._next_keyframe_id = max(self._next_keyframe_id, keyframe_id + 1)
        self._next_point_id = max(self._next_point_id, point_id + 1)
        self._next_map_id = max(self._next_map_id, map_id + 1)

    def new_active_map(self, inertial: bool = False) -> int:
        """Store the active map as non-active and start an empty one.

        Returns:
            Id of the new active map.
        """
        slam_map = SlamMap(self._next_map_id, inertial, self.config, self.database)
        self._next_map_id += 1
        self.maps[slam_map.id] = slam_map
        previous = self.active_id
        self.active_id = slam_map.id
        logger.info("Created map %d (previous active map: %s)", slam_map.id, previous)
        return slam_map.id

    def add_map(self, slam_map: SlamMap, active: bool = False):
        """Register a map built elsewhere, e.g. loaded from disk."""
        if slam_map.id in self.maps:
            raise DuplicateIdException("Map id already in use.", {"map": slam_map.id})
        for keyframe_id in slam_map.keyframes:
            if self.map_of(keyframe_id) is not None:
                raise DuplicateIdException("Keyframe id already in use.", {"keyframe": keyframe_id})
        slam_map.database = self.database
        slam_map.config = self.config
        self.maps[slam_map.id] = slam_map
        for keyframe in slam_map.keyframes.values():
            self.database.add(keyframe)
        self.reserve_ids(
            max(slam_map.keyframes, default=-1),
            max(slam_map.points, default=-1),
            slam_map.id,
        )
        if active or self.active_id is None:
            self.active_id = slam_map.id

    def remove_map(self, map_id: int):
        slam_map = self.maps.pop(map_id)
        for keyframe_id in slam_map.keyframes:
            self.database.remove(keyframe_id)
        if self.active_id == map_id:
            self.active_id = None

    def insert_keyframe(self, keyframe: Keyframe, map_id: int = None) -> Keyframe:
        """Insert a keyframe into a map, by default the active one.

        Raises:
            DuplicateIdException: If any map already holds the keyframe id.
        """
        if self.map_of(keyframe.id) is not None:
            raise DuplicateIdException("Keyframe id already in use.", {"keyframe": keyframe.id})
        self.reserve_ids(keyframe_id=keyframe.id)
        target = self.active if map_id is None else self.maps[map_id]
        return target.insert_keyframe(keyframe)

    def map_of(self, keyframe_id: int) -> Optional[SlamMap]:
        for slam_map in self.maps.values():
            if keyframe_id in slam_map.keyframes:
                return slam_map
        return None

    def keyframe(self, keyframe_id: int) -> Keyframe:
        slam_map = self.map_of(keyframe_id)
        if slam_map is None:
            raise KeyError(keyframe_id)
        return slam_map.keyframes[keyframe_id]

    def all_keyframes(self) -> Iterator[Keyframe]:
        for slam_map in self.maps.values():
            yield from slam_map.keyframes.values()

    def non_active(self) -> List[SlamMap]:
        return [m for m in self.maps.values() if m.id != self.active_id]

    def discard_active_if_young(
        self, age_since_imu_init: float, inertial: bool = True, threshold: float = YOUNG_MAP_SECONDS
    ) -> bool:
        """Drop the active inertial map if tracking was lost shortly after IMU initialization.

        A fresh active map replaces the discarded one.

        Arguments:
            age_since_imu_init: Seconds since the IMU was initialized.
            inertial: Sensor mode uses an IMU; visual maps are never discarded.
            threshold: Youngest age at which maps are kept.

        Returns:
            True if the active map was discarded.
        """
        if not inertial or self.active_id is None or age_since_imu_init >= threshold:
            return False
        discarded = self.active_id
        inertial_map = self.active.inertial
        self.remove_map(discarded)
        self.new_active_map(inertial_map)
        logger.warning("Discarded map %d lost %.1fs after IMU initialization", discarded, age_since_imu_init)
        return True

    def validate(self):
        """Validate every map and the database membership.

        Raises:
            MapIntegrityException: On the first violated invariant.
        """
        seen = set()
        for slam_map in self.maps.values():
            slam_map.validate()
            duplicated = seen & set(slam_map.keyframes)
            if duplicated:
                raise MapIntegrityException("Keyframe ids shared by several maps.", {"keyframes": sorted(duplicated)})
            seen |= set(slam_map.keyframes)
        if seen != self.database.ids():
            raise MapIntegrityException(
                "Keyframe database is out of sync with the maps.",
                {"missing": sorted(seen - self.database.ids())[:10], "extra": sorted(self.database.ids() - seen)[:10]},
            )
        if self.maps and self.active_id not in self.maps:
            raise MapIntegrityException("The atlas has no active map.")

    def __len__(self) -> int:
        return len(self.maps)

    def __repr__(self) -> str:
        return f"<Atlas maps={len(self.maps)} active={self.active_id}>"
