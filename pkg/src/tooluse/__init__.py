"""Tool-use learning: simulator, convolutional autoencoder and multiple-timescale RNN."""

__version__ = "0.1.0"
