"""Physics-guided recurrent networks for lake temperature profiles."""

from . import cli, diffcore, hybrid, lakesim, physics, seqmodel, train

__version__ = "0.1.0"

__all__ = ["cli", "diffcore", "hybrid", "lakesim", "physics", "seqmodel", "train"]
