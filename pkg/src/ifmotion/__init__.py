"""Intention-from-motion: kinematic and dense-trajectory features, bag-of-features
encoding, chi-square kernel SVMs and subject-wise evaluation."""

__version__ = "0.1.0"
