"""Two-stage set-prediction pose estimation with semi-supervised adaptation and pose retrieval."""

__version__ = "0.1.0"
