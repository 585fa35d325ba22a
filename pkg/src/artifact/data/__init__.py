"""Degradation, motion and sample assembly."""
