from typing import Dict, List, Tuple

# Numeric tolerances
# \__________________

# Orthogonality/determinant check of rotation matrices
ROTATION_TOLERANCE: float = 1e-9
# Degenerate frame threshold, relative to the neighborhood radius
DEGENERATE_EPSILON: float = 1e-6
# Below this (relative) projection span every neighbor falls into bin 0
BIN_SPAN_EPSILON: float = 1e-12
# Fine point considered coincident with a coarse point during propagation
COINCIDENT_DISTANCE: float = 1e-12

# Feature modes
# \_____________

FEATURE_MODES: Tuple[str, ...] = ("full", "distances_only", "angles_only", "raw_xyz")
FEATURE_CHANNELS: Dict[str, int] = {
    "full": 4,
    "distances_only": 2,
    "angles_only": 2,
    "raw_xyz": 3,
}

# Layer primitives
# \________________

BN_EPSILON: float = 1e-5
BN_MOMENTUM: float = 0.9

# Adam
ADAM_LEARNING_RATE: float = 0.001
ADAM_BETA1: float = 0.9
ADAM_BETA2: float = 0.999
ADAM_EPSILON: float = 1e-8

# Gradient check
GRADCHECK_STEP: float = 1e-6
GRADCHECK_PRIMITIVE_TOLERANCE: float = 1e-6
GRADCHECK_BLOCK_TOLERANCE: float = 1e-4

# Checkpoints
CHECKPOINT_VERSION: int = 1

# Network plans
# \_____________

# Classification: 1024 -> 256 -> 128 -> 64
CLS_POINTS: int = 1024
CLS_REPRESENTATIVES: List[int] = [256, 128, 64]
CLS_K_NEIGHBORS: List[int] = [64, 32, 16]
CLS_BINS: List[int] = [4, 2, 1]
CLS_OUT_CHANNELS: List[int] = [128, 256, 512]
CLS_HEAD_WIDTHS: List[int] = [256]

# Extra front layer of the 4-layer variant (no point sampling)
FRONT_K_NEIGHBORS: int = 16
FRONT_BINS: int = 2
FRONT_OUT_CHANNELS: int = 64

# Segmentation: 2048 -> 512 -> 128 -> 32
SEG_POINTS: int = 2048
SEG_REPRESENTATIVES: List[int] = [512, 128, 32]
SEG_K_NEIGHBORS: List[int] = [64, 32, 16]
SEG_BINS: List[int] = [4, 2, 1]
SEG_OUT_CHANNELS: List[int] = [128, 256, 512]
SEG_DECODER_K_NEIGHBORS: int = 16
SEG_DECODER_BINS: int = 2
SEG_DECODER_MLP_WIDTHS: List[int] = [256, 128, 128]
SEG_DECODER_OUT_CHANNELS: List[int] = [256, 128, 128]
SEG_INTERPOLATION_NEIGHBORS: int = 3

LIFT_MLP_WIDTHS: List[int] = [64]

CLASSIFIER_MODES: Tuple[str, ...] = ("multi_vector", "single_vector")
TASKS: Tuple[str, ...] = ("classification", "segmentation")

# Training
# \________

CLS_BATCH_SIZE: int = 32
SEG_BATCH_SIZE: int = 16
VALIDATION_FRACTION: float = 0.1

# Rotation regimes: name -> (train side, test side)
ROTATION_REGIMES: Dict[str, Tuple[str, str]] = {
    "z/z": ("z", "z"),
    "SO3/SO3": ("so3", "so3"),
    "z/SO3": ("z", "so3"),
    "none": ("none", "none"),
}
TABLE_REGIMES: List[str] = ["z/z", "SO3/SO3", "z/SO3"]

# Synthetic shapes
# \________________

SHAPE_CLASSES: List[str] = ["sphere", "cube", "cylinder", "cone", "torus"]
PART_NAMES: Dict[str, List[str]] = {
    "cylinder": ["body", "cap"],
    "cone": ["lateral", "base"],
}
MIN_SHAPE_POINTS: int = 8

# Output files
# \____________

RESULTS_DIR: str = "results/"
CONFIG_DIR: str = "riconvnet/config/"
METRICS_SCHEMA_VERSION: int = 1
FLOAT_PRECISION: int = 17

# CLI exit codes
EXIT_OK: int = 0
EXIT_CONFIG_ERROR: int = 2
EXIT_RUNTIME_ERROR: int = 3
EXIT_CHECK_FAILED: int = 4
