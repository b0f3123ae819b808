"""
Constants
"""

from typing import Dict, Tuple

# Intensities are stored as 8-bit values on disk
PIXEL_MAX: float = 255.0

# Key-frame selection and temporal inputs
KEY_FRAME_WINDOW: int = 15  # last frames scanned for the most stable one
FRAME_DIFF_OFFSET: int = 9  # I_FD = |F[k] - F[k-9]|
FRAME_DIFF_OFFSET_SWEEP: Tuple[int, ...] = (5, 7, 9, 11, 13)
TDL_STACK_SIZE: int = FRAME_DIFF_OFFSET + 1  # frames k-9..k
MIN_FRAME_COUNT: int = KEY_FRAME_WINDOW + 1
MIN_FRAME_SIZE: int = 16
MIN_KEY_FRAME_INDEX: int = FRAME_DIFF_OFFSET
AUGMENTATION_OFFSETS: Tuple[int, ...] = (1, 2)  # extra training frames after k

# Motion extractors
BACKGROUND_ALPHA: float = 0.95  # update rate of the running background
FLOW_WINDOW: int = 5
FLOW_MIN_EIGENVALUE: float = 1e-5

# Metric / thresholds
DEFAULT_THRESHOLD: float = 0.5

# Loss constants (a, lambda0, lambda1)
LOSS_A: float = 0.5
LOSS_LAMBDA0: float = 0.1
LOSS_LAMBDA1: float = 1.0
BCE_EPS: float = 1e-7
DICE_SMOOTH: float = 1.0

# Training protocol
BATCH_SIZE: int = 8
EPOCHS: int = 150
INITIAL_LR: float = 1e-3
ADAM_BETAS: Tuple[float, float] = (0.9, 0.999)
TDL_WARMUP_EPOCHS: int = 10
VAL_FRACTION: float = 0.2
TRAIN_LOG_COLUMNS: Tuple[str, ...] = (
    "epoch",
    "lr",
    "l_ltd",
    "l_lrs",
    "l_seg",
    "total",
    "train_dice",
    "val_dice",
)
WARMUP_LOG_COLUMNS: Tuple[str, ...] = ("epoch", "lr", "l_ltd")

# Dataset statistics of the clinical collection, used to shape the phantoms
TRAIN_TEST_RATIO: Tuple[int, int] = (362, 124)
TRAIN_FRACTION: float = TRAIN_TEST_RATIO[0] / sum(TRAIN_TEST_RATIO)
RICH_BLOOD_PROBABILITY: float = 548 / 760
MEAN_TUMORS_PER_SAMPLE: float = 760 / 488
MAX_TUMORS_PER_SAMPLE: int = 10
TUMOR_SIZE_RANGE: Tuple[float, float] = (6.5, 217.0)  # diameters at source width
TUMOR_SIZE_MEAN: float = 69.37
SOURCE_WIDTH: int = 1021
MIN_TUMOR_RADIUS: float = 2.0

# File formats
MANIFEST_SCHEMA_VERSION: int = 1
RESULTS_SCHEMA_VERSION: int = 1
CHECKPOINT_HEADER: str = "dsa-ltd-ckpt/1"
MANIFEST_NAME: str = "manifest.json"
FRAME_NAME_TEMPLATE: str = "frame_{:03d}.png"
TUMOR_MASK_NAME: str = "tumor_mask.png"
LIVER_MASK_NAME: str = "liver_mask.png"
DETERMINISTIC_ENV: str = "DSA_LTD_DETERMINISTIC"

# Fusion inputs
KEY_FRAME: str = "key_frame"
FRAME_DIFFERENCE: str = "frame_difference"
OPTICAL_FLOW: str = "optical_flow"
BACKGROUND_SUBTRACTION: str = "background_subtraction"
TDL_OUTPUT: str = "tdl_output"
LIVER_MAP: str = "liver_map"
RAW_MOTION_INPUTS: Tuple[str, ...] = (
    FRAME_DIFFERENCE,
    OPTICAL_FLOW,
    BACKGROUND_SUBTRACTION,
)
FUSION_INPUTS: Tuple[str, ...] = (KEY_FRAME,) + RAW_MOTION_INPUTS + (
    TDL_OUTPUT,
    LIVER_MAP,
)
FULL_FFS_INPUTS: Tuple[str, ...] = (KEY_FRAME, TDL_OUTPUT, LIVER_MAP)

# Reference Dice (%) and delta vs. the U-Net baseline on the clinical data.
# Reported alongside synthetic results, never asserted.
REFERENCE_DICE: Dict[str, Tuple[float, float]] = {
    "baseline": (70.75, 0.0),
    "kf+of": (68.35, -2.40),
    "kf+fd": (71.73, 0.98),
    "kf+bs": (68.89, -1.86),
    "kf+tdl-unsupervised": (69.90, -0.85),
    "kf+tdl-supervised": (72.32, 1.57),
    "ffs+lrs": (72.01, 1.26),
    "dsa-ltdnet": (73.68, 2.97),
}
