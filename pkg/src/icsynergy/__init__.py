"""In-context learning of drug-synergy functions with a tuple-token transformer."""

__version__ = "0.1.0"
