"""priorfill - stable desk-scale inpainting with a masked auto-encoder prior guiding a frozen latent diffusion model."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("priorfill")
except PackageNotFoundError:
    # Package is not installed, fallback to a default version
    __version__ = "0.3.0.dev"
