"""
Default configuration parameters for the SCALE-COMM warehouse simulator and trainer
"""

__version__ = "0.3.0"

# Warehouse environment
GRID_WIDTH = 10             # Grid cells along x
GRID_HEIGHT = 10            # Grid cells along y
N_AGENTS = 3                # Cooperative agents
K_CANDIDATES = 4            # Candidate task rows per observation
EPISODE_LENGTH = 300        # Steps per PPO episode
TASK_POOL_SIZE = 6          # Concurrent non-delivered tasks
TASK_FEATURE_DIM = 5        # pickup x,y / drop x,y / heuristic distance
SELF_FEATURE_DIM = 3        # x, y, carrying flag

# Shaped rewards
R_ASSIGN = 0.1              # Binding a task
R_PICK = 0.5                # Arriving at pickup
R_DROP = 1.0                # Delivering at drop corner
R_UNASSIGNED = -0.01        # Per idle agent-step

# Heuristic data collection (Phase I dataset)
COLLECT_EPISODES = 40       # Episodes in the replay buffer
COLLECT_STEPS = 200         # Steps per collection episode

# Encoder dimensions
HIDDEN_DIM = 256            # d_h
LATENT_DIM = 192            # d_z
MESSAGE_DIM = 64            # d_m
ATTENTION_DIM = 32          # d_a, width of the query/key space
EMA_MOMENTUM = 0.996        # μ
NORM_EPS = 1e-8             # ε-guard for message normalization

# Self-supervised objectives
SSL_ALPHA = 1.0             # Cross-agent contrast weight
SSL_BETA = 0.5              # KNN contrast weight
SSL_GAMMA_CPC = 0.8         # Temporal CPC weight
SSL_DELTA = 0.3             # Prototype distillation weight
SSL_ETA = 0.2               # Invariance weight
INV_LAMBDAS = (1.0, 0.5, 0.5, 0.25)  # L_pred, L_ts, L_hz, L_CKA
SSL_VIEW_WEIGHT = 0.0       # Augmented-view message agreement penalty (off by default)
TEMPERATURE = 0.1           # τ
CPC_HORIZON = 3             # k
QUEUE_CAPACITY = 1024       # Q
N_PROTOTYPES = 16           # P

# Augmentation (online branch; EMA branch halves the mask and drops dropout)
AUG_MASK_PROB = 0.2         # Candidate row masking probability
AUG_JITTER_STD = 0.02       # Gaussian jitter on task features
AUG_DROPOUT = 0.1           # Dropout on self features

# Phase I pretraining
SSL_EPOCHS = 30             # Passes over the replay buffer
SSL_BATCH_GROUPS = 32       # Timestep groups per minibatch (x N agents rows)
SSL_LR = 1e-3               # Adam learning rate
LOG_EVERY_STEPS = 100       # Progress line interval

# Optimizer
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Phase II PPO
PPO_ITERATIONS = 10         # Fine-tuning iterations
PPO_STEPS_PER_ITER = 16384  # Environment steps per iteration
PPO_EPOCHS = 6              # Update epochs per iteration
PPO_MINIBATCH = 2048        # Samples per minibatch
PPO_CLIP = 0.2              # ε_clip
PPO_GAMMA = 0.99            # γ_discount
PPO_GAE_LAMBDA = 0.95       # λ_gae
PPO_ENTROPY_COEF = 0.01
PPO_VALUE_COEF = 0.5
PPO_LR = 3e-4
PPO_AUX_BATCH = 256         # Samples in the auxiliary temporal batch
TASK_BIAS_ENABLED = True    # Add the bilinear task-bias score to policy logits
TASK_BIAS_BETA = 0.5        # β
PROTO_AFFINITY_BETA = 0.0   # Prototype-affinity logit bias scale (0 disables)
ENCODER_MODE = "finetune"   # "frozen" or "finetune"

# Curriculum λ(t)
CURRICULUM_LAMBDA_MIN = 0.0
CURRICULUM_LAMBDA_MAX = 0.1
CURRICULUM_RAMP_FRACTION = 0.5  # T_ramp as a fraction of total fine-tuning steps

# Evaluation
EVAL_EPISODES = 5           # Policy rollouts for KPIs
EVAL_COLLECT_EPISODES = 10  # Heuristic episodes encoded for representation metrics
PROBE_MAX_EPOCHS = 500      # Linear probe iteration cap
PROBE_TOL = 1e-6            # Linear probe convergence tolerance
N_CATEGORIES = 4            # Drop corners

# Seeds
DEFAULT_SEED = 0

# File paths (relative to a run directory)
OUTPUT_ROOT_ENV = "SCALECOMM_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
MANIFEST_FILE = "manifest.json"
BUFFER_FILE = "buffer.ndjson"
PRETRAIN_CHECKPOINT_FILE = "pretrain_checkpoint.json"
PRETRAIN_LOSS_FILE = "pretrain_losses.csv"
PRETRAIN_REPORT_FILE = "pretrain_report.json"
FINETUNE_CHECKPOINT_FILE = "finetune_checkpoint.json"
FINETUNE_REPORT_CSV = "finetune_report.csv"
FINETUNE_REPORT_FILE = "finetune_report.json"
METRICS_JSON_FILE = "metrics.json"
METRICS_CSV_FILE = "metrics.csv"
KPI_CSV_FILE = "kpis.csv"
ABLATION_CSV_FILE = "ablation_grid.csv"
