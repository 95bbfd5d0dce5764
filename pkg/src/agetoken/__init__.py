"""Anonymous age-verification tokens built on blind RSA signatures."""

__version__ = "0.1.0"
