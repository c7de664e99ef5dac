"""Multi-view adversarial domain generalization at desk scale."""

__version__ = "0.1.0"
