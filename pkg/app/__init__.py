"""Group recursive box refinement - iterative detection refinement with group confidence pooling."""

__version__ = "0.1.0"
