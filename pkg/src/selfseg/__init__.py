"""Self-annotating U-Net segmentation of low-contrast grayscale image stacks."""

__version__ = "0.1.0"
