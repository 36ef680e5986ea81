from typing import Dict

# Exit codes (stable contract for harnesses)
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_SCHEMA = 2
EXIT_NO_CONVERGENCE = 3
EXIT_IO = 4

# Environment override prefix: POPFLOW_<SECTION>__<KEY>=<json value>
ENV_PREFIX = "POPFLOW_"

# Output file names
FILE_OBSERVATIONS = "observations.csv"
FILE_TRUE_MARGINALS = "true_marginals.csv"
FILE_TRUE_FLOWS = "true_flows.csv"
FILE_FLOWS = "flows.csv"
FILE_MARGINALS = "marginals.csv"
FILE_COSTS = "costs.csv"
FILE_BETAS = "betas.csv"
FILE_TRACE = "trace.json"
FILE_METRICS = "metrics.json"
FILE_PER_STEP = "per_step.csv"
FILE_HEATMAP = "heatmap.csv"
FILE_MANIFEST = "manifest.json"
FILE_LOG = "popflow.log"

# Message constants
MSG_NEED_T = "need T >= 2"
MSG_ZERO_MASS = "observation at step {step} (replica {replica}) has zero total mass"
MSG_MISSING_STEP = "no observations at time step {step}"
MSG_USE_LOG_DOMAIN = "message underflow; retry with log_domain=True"

# Default basis exponents for the ISTA cost model
DEFAULT_EXPONENTS = (0.5, 1.0, 2.0, 3.0)

# Cost clamp, in units of eps
C_MAX_FACTOR = 50.0

VARIANTS: Dict[str, str] = {
    "istc": "SBP-ISTC (symmetric zero-diagonal costs, iterative scaling)",
    "ista": "SBP-ISTA (sparse basis-combination costs, ISTA)",
}
