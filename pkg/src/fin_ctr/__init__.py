"""Click-through-rate modeling over spatial-temporal retrieved behavior sequences."""

__version__ = "0.1.0"
