"""Augmented-Lagrangian solvers for the LP formulation of discounted MDPs."""

from . import analysis, cli, envs, lp_oracle, mdp_core, nets, scal  # noqa: F401

__version__ = "0.1.0"
