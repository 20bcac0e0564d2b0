"""FBS: input-dependent channel gating for convolutional networks.

A numpy engine for training and running convolutional networks whose
layers predict per-input channel saliencies, keep the ``ceil(d * C)``
most salient output channels and skip the rest, on both the input and
output side of every convolution.
"""

__version__ = "0.1.0"
