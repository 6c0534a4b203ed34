"""Continuous-time mmWave beam tracking with closed-form liquid networks.

Subpackages: ``tensor`` (autograd kernel), ``channel``, ``lnn``, ``models``,
``dataset`` and ``harness`` (training, evaluation, sweeps, CLI).
"""
__version__ = "0.1.0"
