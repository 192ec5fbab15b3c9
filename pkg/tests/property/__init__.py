"""Property-based testing module for the detection refiner."""
