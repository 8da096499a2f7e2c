"""Content-based remote-sensing image retrieval with residual autoencoder
features and a learned pair discriminator, on a small numpy autodiff core."""

__version__ = "0.1.0"
