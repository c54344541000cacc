"""Contains integration tests for this package."""
