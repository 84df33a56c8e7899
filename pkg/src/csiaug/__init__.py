"""Channel- and transceiver-aware data augmentation for CSI localization."""

__version__ = "0.1.0"
