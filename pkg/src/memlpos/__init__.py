"""CSI fingerprint positioning with multi-environment meta-learning and
transfer to new environments."""

__version__ = "0.1.0"
