"""Cross-modal neuron matching: synthetic data, dual-channel attention
encoder, metric-learning objectives, training policies, evaluation, and
visualization."""

__version__ = "0.1.0"
