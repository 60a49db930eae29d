"""Tests for PriorFill."""
