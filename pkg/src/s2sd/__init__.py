"""Multi-scale similarity self-distillation for metric-learning embedding heads."""

__version__ = "0.1.0"
