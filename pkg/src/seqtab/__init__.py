"""Field- and time-aware hierarchical transformer for sequential tabular data.

The package covers the whole desk-scale pipeline: schema inference and
quantile tokenization, windowing and masking, a small reverse-mode autodiff
core, the two-level encoder with time-aware positions, masked-token
pretraining plus downstream classification, evaluation/export tools, and a
deterministic synthetic data generator with planted anomaly rules.
"""

__version__ = "0.1.0"
