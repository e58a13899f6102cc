"""clamber: contact-implicit transition planning for wall-climbing robots."""

__version__ = "0.1.0"
