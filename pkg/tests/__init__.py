"""Test package for Combo Retrieval."""
