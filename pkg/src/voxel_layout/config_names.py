"""Run configuration key names."""

SEED = "seed"

PATHS_DATA = "paths.data"
PATHS_OUT = "paths.out"

GRID_RESOLUTION = "grid.resolution"

CODEC_PATCH = "codec.patch"
CODEC_D = "codec.d"
CODEC_THRESHOLD = "codec.threshold"

MODEL_WIDTH = "model.width"
MODEL_LAYERS = "model.layers"
MODEL_HEADS = "model.heads"
MODEL_VOCAB = "model.vocab"
MODEL_MAX_TEXT_TOKENS = "model.max_text_tokens"
MODEL_TEXT_DIM = "model.text_dim"
MODEL_IDENTITY_AWARE = "model.identity_aware"

FLOW_CFG_WEIGHT = "flow.cfg_weight"
FLOW_NUM_STEPS = "flow.num_steps"
FLOW_DROP_RATE = "flow.drop_rate"

TRAIN_STEPS = "train.steps"
TRAIN_BATCH_SIZE = "train.batch_size"
TRAIN_LR = "train.lr"
TRAIN_WEIGHT_DECAY = "train.weight_decay"
TRAIN_LOG_EVERY = "train.log_every"

DISTILL_T = "distill.T"
DISTILL_STEPS = "distill.steps"
DISTILL_OBJECTS = "distill.objects"
DISTILL_LR_STUDENT = "distill.lr_student"
DISTILL_LR_CRITIC = "distill.lr_critic"
DISTILL_BETA1 = "distill.beta1"
DISTILL_BETA2 = "distill.beta2"
DISTILL_WEIGHT_DECAY = "distill.weight_decay"
DISTILL_RATIO = "distill.ratio"
DISTILL_CFG_WEIGHT = "distill.cfg_weight"
DISTILL_STEP_LOSS = "distill.step_loss"
DISTILL_HOLISTIC_LOSS = "distill.holistic_loss"
DISTILL_RENOISE = "distill.renoise"

ICP_MAX_ITERATIONS = "icp.max_iterations"
ICP_TOLERANCE = "icp.tolerance"
ICP_YAW_CANDIDATES = "icp.yaw_candidates"
ICP_ROTATION_MODE = "icp.rotation_mode"
ICP_MAX_SOURCE_POINTS = "icp.max_source_points"
ICP_MOMENT_REFINEMENT = "icp.moment_refinement"

METRICS_TAU = "metrics.tau"
METRICS_POS_THRESHOLD = "metrics.pos_threshold"
METRICS_YAW_THRESHOLD = "metrics.yaw_threshold"
METRICS_MIN_OBJECTS = "metrics.min_objects"
METRICS_MAX_OBJECTS = "metrics.max_objects"
METRICS_BOOTSTRAP = "metrics.bootstrap"

DATA_TRAIN = "data.train"
DATA_VAL = "data.val"
DATA_TEST = "data.test"

ROLLOUT_ORDER = "rollout.order"
ROLLOUT_DIVERSITY = "rollout.diversity"
