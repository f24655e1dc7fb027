"""Desk-scale RLVR lab: critical-token branching against GRPO/DAPO baselines on a toy arithmetic task."""

__version__ = "0.1.0"
