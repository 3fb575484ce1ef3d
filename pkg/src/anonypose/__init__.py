"""Recoverable anonymization for human pose estimation.

A privacy-enhancing generator, a privacy-recovery generator, and a pose
estimator trained jointly end-to-end, plus the desensitization operators,
compositing pipeline, datasets, metrics, and CLI needed to run desk-scale
experiments.
"""

__version__ = "0.1.0"
