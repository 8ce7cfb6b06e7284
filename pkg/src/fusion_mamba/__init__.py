"""Cross-modality feature fusion in a selective state space (desk-scale)."""

__version__ = "0.1.0"
