"""Contains unit tests for this package."""
