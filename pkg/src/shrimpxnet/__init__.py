"""Desk-scale shrimp disease classification: a numpy CNN with MixUp/CutMix,
FGSM adversarial training, CAM explanations and bootstrap evaluation."""

__version__ = "0.1.0"
