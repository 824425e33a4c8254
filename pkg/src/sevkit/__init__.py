"""Toolkit for five-way dysarthria severity classification.

Ships a multi-task fine-tuning pipeline (shared encoder, mean-pooled
severity head, frame-wise CTC head), classical feature/classifier
baselines, evaluation metrics, latent-space analysis, and a synthetic
desk-scale corpus generator.
"""

__version__ = "0.1.0"

SEVERITY_LEVELS = (0, 1, 2, 3, 4)
NUM_SEVERITY_CLASSES = len(SEVERITY_LEVELS)
