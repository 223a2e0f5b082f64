"""VarLab: tabular laboratory for estimating the variance of the λ-return."""

__version__ = "0.1.0"
