"""Data fission: split one observation into a selection part and an
inference part with a tractable joint law, plus downstream pipelines
for post-selection confidence intervals."""

__version__ = "0.1.0"
