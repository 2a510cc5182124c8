"""Knowledge-distillation logical anomaly detection with a distinctive
feature separation constraint."""

__version__ = "0.1.0"
