"""Multilingual visual question answering with a convolutional seq2seq core.

The pipeline: normalize and tokenize questions, weave in classifier/generative
hint tokens by probability-scaled repetition, append visual patch features
along the sequence axis, train a gated-conv encoder-decoder with multi-step
attention, decode answers greedily, and score them with token F1 and averaged
BLEU.
"""

from .autograd import Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad_check", "__version__"]
