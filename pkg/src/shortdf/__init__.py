"""Shortest-path optimized diffusion: training, few-step sampling and evaluation."""

__version__ = "0.1.0"
