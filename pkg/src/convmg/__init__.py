"""Multigrid for the parametric Darcy problem and its convolutional realisation."""
