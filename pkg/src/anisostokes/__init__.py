"""Equal-order Stokes finite elements with edge-based pressure stabilisation on anisotropic meshes."""

__version__ = "0.1.0"
