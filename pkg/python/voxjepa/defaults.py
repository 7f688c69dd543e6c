"""Module for default modeling assumption constants."""

# phantom geometry, in fractions of the grid half-extent per axis
HEAD_SEMI_AXIS_FRAC = 0.9
SKULL_INNER_SCALE = 0.85
VENTRICLE_SCALE = 0.25
VENTRICULOMEGALY_SCALE = 0.4
SKULL_DEFECT_CAP_FRAC = 0.35  # cap removed where normalized height exceeds 1 - this

# generic (pre-rendering) intensities per tissue class
TISSUE_INTENSITY = {
    "BG": 0.0,
    "SKULL": 1.0,
    "BRAIN": 0.5,
    "VENTRICLE": 0.3,
}
NOISE_STD = 0.02
# lesion offset in noise amplitudes; the amplitude never counts below NOISE_STD
LESION_CONTRAST_SNR = 5.0
LESION_CONTRAST = LESION_CONTRAST_SNR * NOISE_STD
LESION_RADIUS_RANGE = (3.0, 5.0)

DEFAULT_GRID_SHAPE = (32, 96, 96)
DEFAULT_SPACING_MM = (4.0, 1.0, 1.0)

# SYNTH_CT transfer function knots: generic intensity -> Hounsfield-like units
CT_TRANSFER_KNOTS = (0.0, 0.12, 0.3, 0.7, 1.0, 1.2)
CT_TRANSFER_HU = (-1000.0, -1000.0, 10.0, 70.0, 1000.0, 1200.0)

# SYNTH_MR remap s = MR_SCALE * (1 - exp(-MR_RATE * g)) times a polynomial bias field
MR_SCALE = 800.0
MR_RATE = 2.5
MR_BIAS_COEFFS = {"x": 0.08, "y": 0.05, "z": -0.04, "xy": 0.03}

LABEL_VOCAB = (
    "hyper_left",
    "hyper_right",
    "hypo_left",
    "hypo_right",
    "ventriculomegaly",
    "skull_defect",
    "any_lesion",
    "midline_lesion",
)

# preprocessing
TARGET_INPLANE_SPACING_MM = 1.0
TARGET_ACQUISITION_SPACING_MM = 4.0
CLIP_PERCENTILES = (0.5, 99.5)
OTSU_BINS = 256
CT_AIR_THRESHOLD_HU = -500.0

# (width, level, bit_width); MR uses the full clipped range at 8 bits
CT_WINDOWS = {
    "CT_BRAIN": (80.0, 40.0, 8),
    "CT_BLOOD": (200.0, 80.0, 4),
    "CT_BONE": (2800.0, 600.0, 4),
}
MR_BIT_WIDTH = 8

# shard store
SHARD_MAGIC = b"VJSH"
SHARD_VERSION = 1
SHARD_HEADER_BYTES = 64
VOLUME_MAGIC = b"VPHA"
VOLUME_VERSION = 1
VOLUME_HEADER_BYTES = 64
CT_WINDOW_PROBS = {"CT_BRAIN": 0.7, "CT_BLOOD": 0.15, "CT_BONE": 0.15}

# tokenization and masking
PATCH_SHAPE = (4, 16, 16)
TOKEN_FOREGROUND_FRAC = 0.125
MAX_PATCHES_PER_AXIS = 20
# uniform crop windows tried before anchoring the window on a foreground token
CROP_REDRAWS = 8
MULTI_BLOCK_MASKED_FRAC = 0.85
CONTEXT_RATIO = {"SYNTH_MR": 0.25, "SYNTH_CT": 0.20}
PATCH_DROPOUT = 0.2
MIN_BLOCK_EXTENT = 2

# model and training
EMBED_DIM = 64
DEPTH = 4
HEADS = 4
MLP_RATIO = 4.0
PREDICTOR_DEPTH = 2
LN_EPS = 1e-6
INIT_STD = 0.02
POSENC_TEMPERATURE = 10000.0
SMOOTH_L1_BETA = 1.0
LR = 1e-3
WEIGHT_DECAY = 0.05
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WARMUP_FRAC = 0.1
EMA_MOMENTUM_START = 0.996
EMA_MOMENTUM_END = 1.0
COLLAPSE_STD_FLOOR = 1e-3

# evaluation
BOOTSTRAP_REPLICATES = 2000
EQUIVALENCE_BAND = 0.05
MIN_TRAIN_POSITIVES = 30
MIN_TEST_POSITIVES = 10
MAX_DEGENERATE_FRAC = 0.5
KMEANS_K = 3

# attentive probe
PROBE_HIDDEN_MULT = 2
PROBE_LR = 1e-3
PROBE_EPOCHS = 100
PROBE_PATIENCE = 15
PROBE_BATCH_SIZE = 16

# Platt scaling
PLATT_MAX_ITER = 100
PLATT_GRAD_TOL = 1e-8

# latent-space tools
KNN_K = 1
KMEANS_MAX_ITER = 100
