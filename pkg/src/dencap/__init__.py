"""dencap: single-tooth caption dataset pipeline and evaluation toolkit."""

__version__ = "0.1.0"
