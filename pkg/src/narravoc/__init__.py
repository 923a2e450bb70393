"""narravoc: a generative-retrieval narration engine.

Compresses narration corpora into a hierarchical prefix/postfix/scene
vocabulary, retrieves narrations for embedded clips through a causal
model's trailing retrieval token, detects out-of-vocabulary events, and
upgrades the vocabulary through pluggable completion clients.
"""

__version__ = "0.1.0"

from .errors import NarravocError

__all__ = ["NarravocError", "__version__"]
