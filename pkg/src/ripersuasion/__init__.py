"""Rational-inattention discrete choice with Bayesian persuasion: simulation and two-step GMM estimation."""

__version__ = "0.1.0"
