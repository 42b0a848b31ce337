"""Dual-edge graph attention segmentation with head pruning and distillation."""

__version__ = "0.1.0"
