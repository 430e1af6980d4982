from .figures import FigureSpec, SchemaError, render, specs_from_index
from .geometry import RegionError, halfspaces_to_polygon

__all__ = ["FigureSpec", "RegionError", "SchemaError", "halfspaces_to_polygon",
           "render", "specs_from_index"]
