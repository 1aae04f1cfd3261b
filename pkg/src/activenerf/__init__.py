"""Uncertainty-aware radiance fields with active view selection."""
