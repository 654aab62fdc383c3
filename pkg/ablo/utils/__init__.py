"""Shared helpers: console output, result writers and RNG streams."""
