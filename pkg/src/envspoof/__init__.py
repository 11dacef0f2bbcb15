"""Environmental sound deepfake detection: log-Mel front-end, frozen
multi-layer encoder, softmax layer fusion, FFN back-end with attentive
statistics pooling, class-weighted training and EER scoring."""

from .errors import DimensionError, FormatError, NumericError, ParameterError, StateError

__version__ = "0.1.0"
