from .simulate import run_simulate
from .estimate import run_estimate
from .evaluate import run_evaluate

# Export list
__all__ = [
    "run_simulate",
    "run_estimate",
    "run_evaluate",
]
