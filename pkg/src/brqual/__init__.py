"""brqual: detect, improve, and evaluate low-quality bug reports."""

__version__ = "0.1.0"
