from __future__ import annotations

import math

LOGGER_NAME = "mvgrid.edit"

# mv-grid layout: 3 rows x 2 columns of square tiles, tile k at (k // 2, k % 2)
GRID_ROWS = 3
GRID_COLS = 2
N_VIEWS = GRID_ROWS * GRID_COLS
N_CHANNELS = 3
MIN_TILE_SIZE = 8
DEFAULT_TILE_SIZE = 32

VALUE_MIN = -1.0
VALUE_MAX = 1.0
BACKGROUND_VALUE = -1.0

# role suffixes for image files
ROLE_SUFFIXES = {"src": "_src", "tar": "_tar", "edit": "_edit"}

# cameras, in tile order; the condition camera is frontal
GRID_AZIMUTHS_DEG = (30.0, 90.0, 150.0, 210.0, 270.0, 330.0)
GRID_ELEVATIONS_DEG = (20.0, -10.0, 20.0, -10.0, 20.0, -10.0)
COND_AZIMUTH_DEG = 0.0
COND_ELEVATION_DEG = 0.0
VIEW_HALF_EXTENT = 1.0
CAMERA_DISTANCE = 3.0
LIGHT_DIRECTION = tuple(c / math.sqrt(3.0) for c in (1.0, 1.0, 1.0))
AMBIENT = 0.3

# synthetic scenes
MIN_PRIMITIVES = 1
MAX_PRIMITIVES = 5
PRIMITIVE_KINDS = ("sphere", "box")
EDIT_KINDS = ("recolor", "add_primitive", "remove_primitive", "rescale")
MIN_PRIMITIVE_SIZE = 0.15
MAX_PRIMITIVE_SIZE = 0.45

# edit defaults; presets are a fixed choice spanning mild texture to large geometry edits,
# recorded with the reference run in tests/data/reference_run.json
DEFAULT_TOTAL_STEPS = 50
DEFAULT_N_MAX = 33
DEFAULT_CFG_TAR = 3.5
DEFAULT_CFG_SRC = 1.0
PRESETS: dict[str, dict[str, float | int]] = {
    "mild-texture": {"n_max": 20, "cfg_tar": 2.0},
    "appearance": {"n_max": 27, "cfg_tar": 3.5},
    "local-geometry": {"n_max": 33, "cfg_tar": 5.5},
    "large-geometry": {"n_max": 45, "cfg_tar": 7.5},
}

METHODS = ("propagate", "sdedit", "flowedit_coupling", "naive")
REFERENCE_METHODS = ("oracle", "identity")

# toy network
NET_LAYERS = 4
NET_CHANNELS = 32
NET_KERNEL_SIZE = 3
TIME_EMBEDDING_DIM = 16

# metrics
MASK_EPSILON = 2.0 / 255.0
PSNR_PEAK = 2.0
PSNR_CAP = 100.0
PSNR_MSE_FLOOR = 1e-10

# on-disk formats
CHECKPOINT_MAGIC = b"MVGEDIT\x00"
CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1
REPORT_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
SCENES_DIR = "scenes"
SCENE_FILES = {
    "src_grid": "src_grid.png",
    "src_cond": "src_cond.png",
    "tar_grid": "tar_grid.png",
    "tar_cond": "tar_cond.png",
}

# CLI exit codes
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
