"""kpzlab-plots: static figures from kpzlab sweep CSVs and reports."""

__version__ = "0.1.0"

from .render import KINDS, PlotError, PlotSpec, render

__all__ = ["KINDS", "PlotError", "PlotSpec", "render", "__version__"]
