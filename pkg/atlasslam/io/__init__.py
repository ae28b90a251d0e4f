"""Dataset, trajectory, feature-track and atlas files."""

from .tum import format_line, read_tum, write_tum
from .tracks import TrackFrame, read_tracks, write_tracks
from .euroc import (
    EurocSequence,
    ingest_euroc,
    read_groundtruth_csv,
    read_image_timestamps,
    read_imu_csv,
    write_bundle,
    write_imu_csv,
)
from .mapfile import load_atlas, save_atlas
