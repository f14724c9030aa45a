"""diagnokit: cell-type deconvolution and interpretable diagnosis toolkit."""

__version__ = "0.1.0"
