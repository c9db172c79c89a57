"""Synthetic bilingual and code-switching corpus."""
