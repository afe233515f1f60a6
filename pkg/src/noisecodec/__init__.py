"""Joint denoising and learned image compression."""

__version__ = "0.1.0"
