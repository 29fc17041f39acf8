"""Predictive generative networks: a small numpy autodiff stack, the
CNN-LSTM-deCNN generator with its adversarial discriminator, procedural video
datasets, training loops and representation analyses."""

__version__ = "0.1.0"
