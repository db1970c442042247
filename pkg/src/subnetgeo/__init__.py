"""Evaluate IP-geolocation databases against GPS ground truth and measure subnet geography."""

__version__ = "0.1.0"
