"""Binary atlas files, used to carry maps from one session to the next."""

import logging
import pickle
from pathlib import Path
from typing import Union

from ..exceptions import DataException
from ..models import Atlas

logger = logging.getLogger(__name__)

MAGIC = b"ATLASSLAM"
VERSION = 1


def save_atlas(atlas: Atlas, path: Union[str, Path]):
    """Write the atlas with its maps, keyframe database and id counters."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        pickle.dump({"version": VERSION, "atlas": atlas}, f, protocol=pickle.HIGHEST_PROTOCOL)
    logger.info("Saved %r to %s", atlas, path)


def load_atlas(path: Union[str, Path]) -> Atlas:
    """Read an atlas written by :func:`save_atlas` and check its integrity.

    Raises:
        DataException: If the file is not an atlas file or has another version.
        MapIntegrityException: If the stored maps are inconsistent.
    """
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise DataException("Not an atlas file.", {"path": str(path)})
        try:
            payload = pickle.load(f)
        except (pickle.UnpicklingError, EOFError, AttributeError) as e:
            raise DataException(f"Corrupted atlas file: {e}", {"path": str(path)}) from None
    if not isinstance(payload, dict) or payload.get("version") != VERSION:
        raise DataException("Unsupported atlas file version.", {"path": str(path)})
    atlas = payload["atlas"]
    atlas.validate()
    logger.info("Loaded %r from %s", atlas, path)
    return atlas
