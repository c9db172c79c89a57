"""Chunked streaming inference with cached causal state."""
