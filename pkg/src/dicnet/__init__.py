"""Teacher/student feature distillation for pixel-level anomaly discovery in
semantic segmentation, with a synthetic benchmark and evaluation tooling."""

__version__ = "0.1.0"
