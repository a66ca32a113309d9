"""Desk-scale multi-channel target-speaker VAD diarization pipeline."""

__version__ = "0.1.0"
