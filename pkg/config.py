"""
config.py - Central configuration for the Fast Nystrom Attention toolkit.
All constants, tolerances, defaults, paths, and env-var names.
"""

import os

# =============================================================================
# PROJECT PATHS
# =============================================================================
PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
ENV_FILE = os.path.join(PROJECT_ROOT, ".env")

# =============================================================================
# THREADS
# =============================================================================
THREADS_ENV_VAR = "FNA_THREADS"   # caps numba worker threads when set

# =============================================================================
# NUMERICS
# =============================================================================
PINV_REL_TOL = 1e-6         # singular values below rel_tol * sigma_max are dropped
FNA_PINV_REL_TOL = 1e-2     # middle-factor cutoff when landmarks cover only part of the sequence
ERF_MAX_ERROR = 1e-7        # bound on |scipy erf - erf| in float64, checked by the GELU tests
LAYER_NORM_EPS = 1e-5

# =============================================================================
# SAMPLING
# =============================================================================
DEFAULT_SAMPLE_COUNT = 64
KMEANS_ITERS = 10

# =============================================================================
# DETECTION
# =============================================================================
DETECTION_LM = 9            # formation layer (frozen prefix ends here)
DETECTION_LD = 13           # detection layer for a depth-24 model
DETECTION_MAX_ITERS = 10
ROW_SUM_TOL = 1e-4          # tolerance for "rows of A sum to 1"

# =============================================================================
# SYNTHETIC FIXTURE
# =============================================================================
SYNTH_CARRIER = 10.0        # magnitude of the shared +/- carrier channels
SYNTH_NOISE = 0.05          # seeded jitter on carrier channels
SYNTH_PRIORITY_DECAY = 0.9  # potential of the i-th planted token is decay**i
SYNTH_SUPPRESSION = 0.8     # fraction of the winner's potential pushed onto others
SYNTH_TIER_SPREAD = 0.01    # relative potential step between tokens revealed together
SYNTH_WINNER_SHARPNESS = 200.0
SYNTH_DETECT_SHARPNESS = 20.0
SYNTH_GROWTH_GAIN = 200.0   # fc1 slope of the growth unit
SYNTH_GROWTH_SCALE = 10.0   # fc2 write-out of the growth unit
SYNTH_READ_SHARPNESS = 2.0  # late-layer attention pull toward massive tokens
SYNTH_MAX_PLANTED = 6
SYNTH_MIN_MODEL_DIM = 12

# =============================================================================
# BENCHMARK
# =============================================================================
BENCH_TRIALS = 5
BENCH_WARMUPS = 2
BENCH_HEADS = 1
BENCH_HEAD_DIM = 64
BENCH_DEFAULT_LENGTHS = [256, 512, 1024, 2048]
EXACT_MEMORY_CAP_BYTES = 4 * 1024 ** 3   # exact records above this are skipped
ERROR_SWEEP_COLUMNS = ["s", "seed", "frob_err", "maxabs_err"]

# =============================================================================
# CLI
# =============================================================================
EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_USAGE_ERROR = 2
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
