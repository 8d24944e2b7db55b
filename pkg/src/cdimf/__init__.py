"""Cross-domain implicit matrix factorization with ADMM consensus on shared users."""

__version__ = "0.1.0"
