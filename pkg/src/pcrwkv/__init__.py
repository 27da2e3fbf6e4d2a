"""Linear-time RWKV point-cloud classification with geometric token shift and
cross-domain key alignment, built on a small float64 autodiff engine."""

__version__ = "0.1.0"
