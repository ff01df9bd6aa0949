"""Acoustic face-scan authentication for smart glasses.

FMCW chirps, echo-profile extraction, residual-CNN enrollment and a synthetic
multipath channel to exercise the whole pipeline without human subjects.
"""

__version__ = "0.1.0"
