"""Constants."""

DEFAULT_RESOLUTION = 16
MAX_RESOLUTION = 64

DEFAULT_PATCH_SIZE = 2

# world step of procedural placements; one default patch at the default resolution
SCENE_LATTICE = 0.125

DEFAULT_LATENT_CHANNELS = 8
DEFAULT_DECODE_THRESHOLD = 0.0

ROPE_BASE = 10000.0
ROPE_BANDS = 4  # f, h, w, l

DEFAULT_CFG_WEIGHT = 3.0
DEFAULT_NUM_STEPS = 50
DEFAULT_DROP_RATE = 0.1

STUDENT_STEPS = 4

DMD_NORMALIZER_EPS = 1e-8

ICP_MAX_ITERATIONS = 50
ICP_TOLERANCE = 1e-6
ICP_YAW_CANDIDATES = 8
ICP_MAX_SOURCE_POINTS = 512

SCENE_REJECTION_BUDGET = 1000
SCENE_MIN_OBJECTS = 3
SCENE_MAX_OBJECTS = 10

TRAIN_SEED_START = 0
VAL_SEED_START = 100_000
TEST_SEED_START = 200_000

BOOTSTRAP_RESAMPLES = 1000
