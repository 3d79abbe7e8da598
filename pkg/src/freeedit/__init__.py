"""Single-view edit propagation to novel views with a generalisable
epipolar-transformer renderer, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
