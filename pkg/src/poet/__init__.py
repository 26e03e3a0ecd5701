"""Graph-based video captioning with product-aspect knowledge, on a small numpy autodiff engine."""

__version__ = "0.1.0"
