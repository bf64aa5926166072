"""Task-adaptive differentiable architecture search for few-shot classification."""

__version__ = "0.1.0"
