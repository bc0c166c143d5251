import os
import json

# --- CONFIG LOADER ---
# Attempts to load user settings from data/config/tcd_config.json
# This allows a lab machine to override the defaults below without touching code.
USER_CONFIG = {}
try:
    config_path = os.path.join(os.path.dirname(__file__), '../../data/config/tcd_config.json')
    if os.path.exists(config_path):
        with open(config_path, 'r') as f:
            USER_CONFIG = json.load(f)
except (OSError, ValueError):
    USER_CONFIG = {}

# --- 1. SEQUENCE GEOMETRY ---
OBSERVATION_LEN = USER_CONFIG.get('observation_len', 25)   # O
PREDICTION_LEN = USER_CONFIG.get('prediction_len', 25)     # P
SHORT_HORIZON_RATIO = 0.2                                  # K = round(0.2 * P)
FPS = USER_CONFIG.get('fps', 25.0)
ROOT_JOINT = 0

# --- 2. DIFFUSION ---
DIFFUSION_STEPS = USER_CONFIG.get('diffusion_steps', 50)   # T
SCHEDULE_KIND = USER_CONFIG.get('schedule_kind', "cosine")
COSINE_OFFSET = 0.008
BETA_MAX = 0.999
# Ablation comparators (linear / quadratic), rescaled by 50/T
ABLATION_BETA_START = 2.5e-3
ABLATION_BETA_END = 0.5

# --- 3. DENOISER ---
# Desk scale (default)
DESK_DENOISER = {"residual_layers": 4, "channels": 32, "heads": 4}
FEEDFORWARD_MULT = 2
STEP_EMBED_DIM = 128
PRECISION = USER_CONFIG.get('precision', "float32")

# --- 4. TRAINING ---
BATCH_SIZE = 32
LEARNING_RATE = 1e-3
DECAY_FACTOR = 0.1
DECAY_MILESTONES = [0.75, 0.9]
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
MASK_REDRAW_LIMIT = 16

# --- 5. CASCADE & EVALUATION ---
SHORT_SAMPLES_TO_AVERAGE = 5
STOCHASTIC_SAMPLES = 50      # best-of-50 protocol
DETERMINISTIC_SAMPLES = 5    # best-of-5 protocol
HORIZONS_MS = [80, 320, 560, 720, 880, 1000]
MULTIMODAL_THRESHOLD = 0.5   # normalized root-relative units
SELECTION_KEY = "ADE"

# --- 6. OCCLUSION REGIMES ---
OCCLUSION_PROB = 0.4
STRUCTURED_FRAC = 0.4
MISSING_FRAMES_FRAC = 0.2
NOISY_LEG_PROB = 0.5
# Pattern names that resolve to another pattern (future_only: clean observation, hidden future)
PATTERN_ALIASES = {"future_only": "full"}
NOISY_SIGMAS_MM = [25.0, 50.0]

# --- 7. SKELETON (17-joint, pelvis rooted, z up, millimeters) ---
JOINT_NAMES = [
    "pelvis", "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "spine", "thorax", "neck", "head",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
]
PARENT_INDEX = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]
LIMB_GROUPS = {
    "right_leg": [1, 2, 3],
    "left_leg": [4, 5, 6],
    "torso": [0, 7, 8, 9, 10],
    "left_arm": [11, 12, 13],
    "right_arm": [14, 15, 16],
}
REST_OFFSETS_MM = [
    (0.0, 0.0, 0.0),
    (-130.0, 0.0, 0.0), (0.0, 0.0, -450.0), (0.0, 0.0, -440.0),
    (130.0, 0.0, 0.0), (0.0, 0.0, -450.0), (0.0, 0.0, -440.0),
    (0.0, 0.0, 230.0), (0.0, 0.0, 250.0), (0.0, 0.0, 110.0), (0.0, 0.0, 120.0),
    (150.0, 0.0, 0.0), (0.0, 0.0, -280.0), (0.0, 0.0, -250.0),
    (-150.0, 0.0, 0.0), (0.0, 0.0, -280.0), (0.0, 0.0, -250.0),
]
PELVIS_HEIGHT_MM = 900.0

# --- 8. SYNTHETIC GAIT RANGES (uniform draws per sequence) ---
GAIT_FREQUENCY_HZ = (0.6, 1.4)
GAIT_LEG_AMPLITUDE_RAD = (0.2, 0.6)
GAIT_ARM_AMPLITUDE_RAD = (0.1, 0.5)
GAIT_TORSO_AMPLITUDE_RAD = (0.0, 0.15)
GAIT_SPEED_MM_S = (0.0, 1500.0)

# --- 9. FILE FORMATS ---
PSEQ_MAGIC = b"PSEQ1\n"
PSEQ_EXTENSION = ".pseq"
CHECKPOINT_MAGIC = b"TCDCKPT1"
CHECKPOINT_VERSION = 1
CHECKPOINT_EXTENSION = ".tcdckpt"

# --- 10. RUNTIME ---
SEED_ENV_VAR = "TCD_SEED"
DATA_DIR = USER_CONFIG.get('data_dir', "data")
LOG_RETENTION_DAYS = USER_CONFIG.get('log_retention_days', 7)
