"""Random forests whose predictions are exact weighted averages of training labels."""

__version__ = "0.1.0"
