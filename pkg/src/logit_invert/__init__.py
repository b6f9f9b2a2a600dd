"""Generative inversion of classifier logits."""

from .attacks import AttackSpec, fgsm, pgd
from .classifier import LogitClassifier
from .trainer import GanTrainConfig, LogitInverter

__all__ = ["AttackSpec", "GanTrainConfig", "LogitClassifier", "LogitInverter", "fgsm", "pgd"]
__version__ = "0.1.0"
