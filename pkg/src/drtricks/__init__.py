"""Data-scarcity training tricks for retinal image analysis at desk scale."""

__version__ = "0.1.0"
