"""Coupled acoustic/occupancy neural implicit fields for ultrasound shape completion."""

__version__ = "0.1.0"
