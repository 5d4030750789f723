"""Channel-dropout-robust HD-sEMG gesture decoding at desk scale."""

__version__ = "0.1.0"
