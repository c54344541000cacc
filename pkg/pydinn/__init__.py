"""Contains sources and tests for this package."""
