"""
Configuration settings for the Gaussian scene tokenization and training pipeline.
"""
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Project paths
PROJECT_ROOT = Path(__file__).parent.parent
DATA_DIR = Path(__file__).parent / "data"
TEMPLATES_FILE = DATA_DIR / "templates.json"
VOCAB_FILE = DATA_DIR / "vocab.json"
RUNS_DIR = Path(os.getenv("GVLM_RUNS_DIR", str(PROJECT_ROOT / "runs")))

# Runtime Configuration
GLOBAL_SEED = int(os.getenv("GVLM_SEED", "0"))
LOG_LEVEL = os.getenv("GVLM_LOG_LEVEL", "INFO").upper()

# Scene Configuration
N_SAMPLE = 40000  # Gaussians sampled per scene
LEVEL_SIZES = (589, 2400)  # Token counts of the two mocked early decoder levels
FEATURE_DIM = 64  # Language feature width d_f at desk scale
GRID_CELL_M = 0.15  # Spatial grid cell size (one ROI step)
QUAT_TOLERANCE = 1e-6
LABEL_BANK_SEED = 1234
MAX_LABEL_COSINE = 0.3  # Pairwise cosine bound between synthetic label embeddings

# Sparsifier Configuration
SCENE_TOKENS = 128
ROI_TOKENS = 4
DOWNSAMPLE_TARGET = 512
ROI_RADIUS_M = 0.15
ROI_STEP_M = 0.15
ATTENTION_HEADS = 8
KMEANS_ITERATIONS = 5
VARIANTS = ("full", "no_depthwise", "learnable_queries", "knn_downsample")

# Model Configuration
LM_DIM = 64
LM_HEADS = 4
LM_LAYERS = 2
LM_MAX_SEQ_LEN = 192
LORA_RANK = 8
LORA_ALPHA = 16.0
LAYER_NORM_EPS = 1e-5

# Training Configuration
TAU = 0.07  # Contrastive temperature
LR_MAX = 1e-4
LR_MIN = 1e-6
WEIGHT_DECAY = 0.1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PRETRAIN_EPOCHS = 5

# Generation Configuration
NUM_BEAMS = 5
TOP_P = 0.9
REPETITION_PENALTY = 3.0
MAX_OUTPUT_LENGTH = 768
MIN_OUTPUT_LENGTH = 1

# Benchmark Configuration
COUNT_QA_ITEMS = 1000
ANSWERS_PER_ITEM = 5
ARTIFACT_MARKERS = ("SPLIT", "REMOVE")

# Binary formats
SCENE_MAGIC = b"GSVL"
SCENE_VERSION = 1
CKPT_MAGIC = b"GVLP"
CKPT_VERSION = 1
