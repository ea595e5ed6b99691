"""Progressive cross-primitive compatibility (ProCC) for open-world compositional zero-shot learning."""

__version__ = "0.1.0"
