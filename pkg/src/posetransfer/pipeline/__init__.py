"""Networks, training stages and inference.

Submodules: ``bundle`` (per-character data), ``config``, ``networks``,
``correspondence`` (keypoint matching, first training stage), ``prior``
(matrix-Fisher pose prior), ``transfer`` (initialization and inference),
``stage2`` (cycle training) and ``diagnostics`` (gradient suite).
"""
