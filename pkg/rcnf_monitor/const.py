"""Constants for the RC-NF anomaly monitor."""

DOMAIN = "rcnf_monitor"

# Artifact format versions
CHECKPOINT_FORMAT_VERSION = 1
CODEBOOK_FORMAT_VERSION   = 1
DATASET_FORMAT_VERSION    = 1

# ─────────────────────────────────────────────
# Window / model dimensions
# ─────────────────────────────────────────────
DEFAULT_WINDOW      = 12    # T, sliding-window length (also task embedding dim)
DEFAULT_POINTS      = 32    # N, grid samples per object mask
DEFAULT_FLOW_STEPS  = 12    # K
DEFAULT_JOINTS      = 7     # J
POSE_DIM            = 7     # xyz + unit quaternion (w, x, y, z)
MAX_CHANNEL_GROUPS  = 4     # point groups folded into the ActNorm/mixing channel axis
DEFAULT_STRIDE      = 1


def state_dim(joints: int = DEFAULT_JOINTS) -> int:
    """Width of one robot-state frame: joints ⊕ gripper ⊕ pose."""
    return joints + 1 + POSE_DIM


# ─────────────────────────────────────────────
# Task codebook
# ─────────────────────────────────────────────
DEFAULT_NUM_TASKS       = 10
DEFAULT_RADIUS          = 5.0
CODEBOOK_ITERATIONS     = 2000
CODEBOOK_STEP_SIZE      = 0.05
RIESZ_EXPONENT          = 1.0
NORM_TOLERANCE          = 1e-6

# ─────────────────────────────────────────────
# RCPQNet
# ─────────────────────────────────────────────
DEFAULT_D_MODEL     = 64
DEFAULT_HEADS       = 4
DEFAULT_GRU_LAYERS  = 1
DEFAULT_MLP_HIDDEN  = 128
DEFAULT_DROPOUT     = 0.0
GAMMA_FLOOR         = 1e-3    # ε_γ in γ = softplus(a) + ε_γ
DEGENERATE_RADIUS   = 1e-9    # frames with a smaller RMS radius use radius 1

# ─────────────────────────────────────────────
# Flow numerics
# ─────────────────────────────────────────────
ACTNORM_MIN_VARIANCE = 1e-12
MIN_ABS_DET          = 1e-12

# ─────────────────────────────────────────────
# Scene simulation
# ─────────────────────────────────────────────
DEFAULT_EPISODE_LENGTH = 48
DEFAULT_MASK_SIZE      = 128     # rendered mask is MASK_SIZE × MASK_SIZE
GEOM_GRID              = 5       # 5×5×5 samples inside an object's box
DEPTH_EPSILON          = 1e-6    # meters, behind-camera filter
JITTER_SIGMA           = 0.003   # normalized image units, end-effector jitter
GEOMETRY_JITTER        = 0.01    # per-episode start/target perturbation
TABLE_LINE             = 0.75    # image y of the table surface
FALL_ACCELERATION      = 0.004   # normalized units / frame², free fall after slippage
SLIP_CLEARANCE         = 0.015   # min height of the held object above the table when it slips
ANOMALY_WINDOW         = (0.2, 0.8)   # middle 60% of the episode

ANOMALY_NONE                 = "none"
ANOMALY_GRIPPER_OPEN         = "gripper_open"
ANOMALY_GRIPPER_SLIPPAGE     = "gripper_slippage"
ANOMALY_SPATIAL_MISALIGNMENT = "spatial_misalignment"
ANOMALY_KINDS = [
    ANOMALY_GRIPPER_OPEN,
    ANOMALY_GRIPPER_SLIPPAGE,
    ANOMALY_SPATIAL_MISALIGNMENT,
]
ALL_EPISODE_KINDS = [ANOMALY_NONE] + ANOMALY_KINDS

LABEL_NORMAL    = "normal"
LABEL_ANOMALOUS = "anomalous"

TASK_IDS = [f"task_{i:02d}" for i in range(DEFAULT_NUM_TASKS)]

# ─────────────────────────────────────────────
# Dataset / training
# ─────────────────────────────────────────────
DEFAULT_EPOCHS            = 100
DEFAULT_NEXT_STAGE_EPOCH  = 30
DEFAULT_BATCH_SIZE        = 64
DEFAULT_LEARNING_RATE     = 1e-3
DEFAULT_GRAD_CLIP         = 5.0
DEFAULT_SAMPLER_BINS      = 10
DEFAULT_VALIDATION_SPLIT  = 0.1
CHECKPOINT_EVERY          = 10
DEFAULT_EPISODES_PER_TASK = 50

SAMPLING_UNIFORM  = "uniform"
SAMPLING_BALANCED = "balanced"

# ─────────────────────────────────────────────
# Monitor
# ─────────────────────────────────────────────
DEFAULT_ALPHA       = 0.05
DEFAULT_PERSIST_K   = 5
DEFAULT_HYSTERESIS  = 0.0
LATENCY_BUDGET_MS   = 50.0

STATE_NORMAL    = LABEL_NORMAL
STATE_ANOMALOUS = LABEL_ANOMALOUS

EVENT_NONE               = "none"
EVENT_ROLLBACK_REQUESTED = "rollback_requested"
EVENT_REPLAN_REQUESTED   = "replan_requested"
EVENT_RESUME             = "resume"
EVENT_FRAME_REJECTED     = "frame_rejected"

# ─────────────────────────────────────────────
# CLI exit codes
# ─────────────────────────────────────────────
EXIT_OK               = 0
EXIT_VALIDATION_ERROR = 2
EXIT_RUNTIME_ERROR    = 3
