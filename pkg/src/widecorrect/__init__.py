"""Semi-supervised wide-angle portrait correction toolkit."""

__version__ = "0.1.0"
