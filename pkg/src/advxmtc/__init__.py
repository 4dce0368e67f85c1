"""Black-box adversarial attacks on multilabel text classifiers."""

__version__ = "0.1.0"
