import numpy as np

GRAVITY_MAGNITUDE = 9.81
"""Default gravity magnitude G in m/s²."""

GRAVITY_INERTIAL = np.array([0.0, 0.0, -GRAVITY_MAGNITUDE])
"""Gravity acceleration in a z-up gravity-aligned frame."""

DESCRIPTOR_BYTES = 32
"""Binary descriptors are 256 bits."""

HUBER_DELTA_2DOF = float(np.sqrt(5.991))
"""Huber threshold in whitened units, 95% of a χ² with 2 degrees of freedom."""

HUBER_DELTA_3DOF = float(np.sqrt(7.815))
"""Huber threshold in whitened units, 95% of a χ² with 3 degrees of freedom."""

MIN_TRACKED_POINTS = 15
"""Below this number of tracked map points the system is visually lost."""

SHORT_TERM_LOST_SECONDS = 5.0
"""Time spent in the recently-lost state before a new map is started."""

YOUNG_MAP_SECONDS = 15.0
"""Inertial maps lost within this time after IMU initialization are discarded."""

TUM_TIMESTAMP_DECIMALS = 9
