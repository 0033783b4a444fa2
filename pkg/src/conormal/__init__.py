"""Calculus of twisted conormal bundles and their quantizations.

The modules split along the pipeline: `geometry` and `relations` build and
compose the classical objects, `hormander` wraps them in generating-function
descriptions, `quantize` discretizes those into oscillatory kernels,
`symbols` computes leading coefficients, and `scenario` runs declarative
JSON drivers through all of it.
"""

__version__ = "0.1.0"
