"""Low-dose Poisson-count reconstruction: exact risk analysis and a CT bench.

Subpackages
-----------
``poisson_stats``  scalar Poisson pmf/sampling and certified truncated series
``diag_model``     diagonal count model, closed-form estimators, exact risk
``tomo``           parallel-beam CT: phantom, Joseph projector, counts, FBP
``solvers``        MAP-EM and projected-gradient reconstruction, tau tuning
``bench``          reproducible experiment runners with stable CSV output
``cli``            command-line entry point (``lowdose`` console script)
"""

from . import bench, cli, diag_model, io_utils, poisson_stats, solvers, tomo

__all__ = [
    "bench",
    "cli",
    "diag_model",
    "io_utils",
    "poisson_stats",
    "solvers",
    "tomo",
]

__version__ = "0.1.0"
