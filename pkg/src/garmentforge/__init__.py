"""Layered body and garment modeling: parsing single meshes into garment layers
and resizing garments by size label."""

from garmentforge.mesh import Mesh

__version__ = "0.1.0"

__all__ = ["Mesh", "__version__"]
