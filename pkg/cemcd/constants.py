import os

# Checkpoint container
CHECKPOINT_MAGIC = "CEMCD1"
CHECKPOINT_VERSION = 1

# Dataset layout
PRE_DIR = "A"
POST_DIR = "B"
LABEL_DIR = "label"
LIST_DIR = "list"
IMAGE_SUFFIX = ".png"
LABEL_THRESHOLD = 127

# Every pyramid level must divide the input
SCALE_DIVISOR = 32
PYRAMID_STRIDES = (4, 8, 16, 32)

DEFAULT_TILE_SIZE = 256
DEFAULT_CHANNELS = (32, 64, 128, 256)
DEFAULT_HEAD_WIDTH = 32
DEFAULT_RESIDUAL_BLOCKS = 6
DEFAULT_THRESHOLD = 0.5

# Overlay palette (RGB)
COLOR_TP = (255, 255, 255)
COLOR_FP = (255, 0, 0)
COLOR_FN = (0, 0, 255)
COLOR_DROPPED = (255, 0, 0)
TN_DIM_FACTOR = 0.5

OUT_ENV_VAR = "CEMCD_OUT"


def default_out_root() -> str:
    return os.environ.get(OUT_ENV_VAR, "runs")
