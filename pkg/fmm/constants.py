"""
Constants for the FMM engine and the vortex/spectral solvers.

Grouped by concern so that kernels, wire formats and tests read the same
numbers from one place.
"""

import math


# ============================================================================
# MODEL FLOP COUNTS (per particle-particle interaction)
# ============================================================================
class Flops:
    """Model flop counts per P2P pair, used for reporting only."""
    BIOT_SAVART = 70
    STRETCHING = 104
    PER_PAIR = BIOT_SAVART + STRETCHING   # 174


# ============================================================================
# TREE / MORTON LIMITS
# ============================================================================
class TreeLimits:
    """Tree construction limits and defaults"""
    MAX_MORTON_LEVEL = 21    # 3 * 21 = 63 bits fit in a 64-bit key
    DEFAULT_MAX_LEVEL = 21
    DEFAULT_N_CRIT = 64


# ============================================================================
# EXPANSION / TRAVERSAL DEFAULTS
# ============================================================================
class EngineDefaults:
    """Defaults for the FMM knobs exposed through RunConfig"""
    ORDER = 10
    THETA = 0.5
    PERIODIC_SHELLS = 3
    IMAGES_PER_AXIS = 3      # 3**3 domains aggregated per periodic level
    BATCH_BUDGET = 512       # M2L items / P2P target cells per sub-batch
    DOMAIN_HALF_WIDTH = math.pi


class MacKind:
    """Multipole acceptance criterion variants"""
    BARNES_HUT = "barnes_hut"
    FMM = "fmm"
    LET = "let"

    ALL = (BARNES_HUT, FMM, LET)


# ============================================================================
# WIRE / FILE FORMATS (all little-endian)
# ============================================================================
class WireFormat:
    """Magic numbers and versions of the binary formats"""
    LET_MAGIC = 0x4C455431        # "LET1"
    LET_VERSION = 1
    SNAPSHOT_MAGIC = 0x56504D31   # "VPM1"
    FIELD_MAGIC = 0x464C4431      # "FLD1"


# ============================================================================
# FLOW DEFAULTS
# ============================================================================
class FlowDefaults:
    """Defaults for the vortex method and spectral reference solver"""
    OVERLAP_RATIO = 2.0          # sigma0 / h
    REINIT_EVERY = 5             # steps between reinitializations
    RBF_TOLERANCE = 1e-4
    RBF_MAX_ITERATIONS = 200
    SPECTRUM_PEAK_DIVISOR = 8    # k_peak = M / 8


# ============================================================================
# MESSAGE LAYER
# ============================================================================
class Timeouts:
    """Timeouts of the in-process message layer (in seconds)"""
    RECEIVE = 120.0
    BARRIER = 120.0
    POLL_INTERVAL = 0.05


# ============================================================================
# EXIT CODES
# ============================================================================
class ExitCodes:
    """Process exit codes of the CLI"""
    SUCCESS = 0
    FAILURE = 1
    VALIDATION = 2
    ACCEPTANCE_BAND = 3
