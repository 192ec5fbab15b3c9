"""Tests for the iterative detection refiner."""
