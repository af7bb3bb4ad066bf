"""advgrid: worst-case adversarial-robustness evaluation at desk scale.

Attacks small trained classifiers over a grid of perturbation sets x
surrogate losses x search methods, aggregates mean / minimum / worst-case
adversarial accuracy per evaluation state, and ships diagnostics for
gradient traps and surrogate / 0-1-loss inconsistency.
"""

__version__ = "1.0.0"

from . import attacks, cli, data, diagnostics, engine, harness, losses, models, sets

__all__ = [
    "attacks",
    "cli",
    "data",
    "diagnostics",
    "engine",
    "harness",
    "losses",
    "models",
    "sets",
    "__version__",
]
