"""Unit test package for cleandf."""
