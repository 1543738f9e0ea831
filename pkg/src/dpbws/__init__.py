"""Dense Points loss, balanced loss weighting and GPS evaluation at desk scale."""

__version__ = "0.1.0"
