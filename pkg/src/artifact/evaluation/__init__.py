"""Pairwise and set-level quality metrics, system evaluation and report tables."""
