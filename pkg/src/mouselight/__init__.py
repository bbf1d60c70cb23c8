"""Optical-mouse covert channel: framing, on-off keying, ARQ link, simulation."""

__version__ = "0.1.0"
