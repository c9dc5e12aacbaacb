"""Evaluation: synthetic characters, metrics, ARAP refinement and the round-trip benchmark.

Submodules: ``synth``, ``metrics``, ``arap``, ``benchmark``.
"""
