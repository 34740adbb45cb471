"""Ultrasonic indoor-positioning simulator."""

__version__ = "0.1.0"
