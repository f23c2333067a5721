"""Desk-scale neural acoustic echo cancellation: DSP, simulation, baselines, model and evaluation."""

__version__ = "0.1.0"
