"""Near-miss detection in cyclist video: dense optical flow, frame/flow fusion and a
convolutional, bidirectional-LSTM and self-attention classifier, built on numpy."""

__version__ = "0.1.0"
