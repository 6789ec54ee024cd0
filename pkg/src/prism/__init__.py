"""Indeterminate speaker representations: frame-contrastive training,
density-based clustering over pair scores, and a hybrid diarization pipeline."""

__version__ = "0.1.0"
