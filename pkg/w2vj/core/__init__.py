"""Numerical core: autodiff, features, model parts, training loops and scoring."""
