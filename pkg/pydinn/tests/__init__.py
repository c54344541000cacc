"""Contains tests for this package."""
