"""Generalized autoregressive binary (GAB) processes: simulation, estimation
and aggregation to Poisson autoregressions."""

__version__ = "0.1.0"
