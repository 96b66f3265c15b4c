"""Desk-scale controllable stuttered-speech synthesis pipeline."""

__version__ = "0.1.0"
