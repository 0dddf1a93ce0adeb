"""Text-enhanced urban region profiling at desk scale.

Synthetic region corpora with paired captions and indicators, a
contrastive-plus-captioning vision-language model, frozen-encoder indicator
regression, cross-city transfer, and a read-only inference service.
"""

__version__ = "0.1.0"
