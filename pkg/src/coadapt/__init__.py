"""Goodput-driven co-adaptation of batch size and 3D parallelism: estimator, policy, planner, simulator."""

__version__ = "0.1.0"
