"""Multi-modal masked pretraining with information-aware masking,
cross-modal substitution, EMA distillation and a four-term objective."""

__version__ = "0.1.0"
