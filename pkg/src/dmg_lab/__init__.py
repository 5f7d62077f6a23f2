"""Offline RL with mildly generalized Bellman backups: exact tabular operators,
theorem checks, a numpy actor-critic agent, synthetic environments and a CLI."""

__version__ = "0.1.0"
