"""Desk-scale workbench for learned tissue triangulation: position-based
tissue simulation, software rendering, contrastive unpaired image
translation, patch-embedding observations, and policy training."""

__version__ = "0.1.0"
