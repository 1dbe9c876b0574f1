"""Stethoscope-domain adaptation toolkit."""
