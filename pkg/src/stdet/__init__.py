"""Video object detection with ConvLSTM temporal fusion and CBAM attention, on a small numpy autograd core."""

__version__ = "0.1.0"
