"""Finite element checks of stability for coupled beam/wave systems with local Kelvin-Voigt damping."""

__version__ = "0.1.0"

from .assembly import DampingCoefficient, DiscreteOperator, ModelKind, assemble  # noqa: E402
from .mesh import CompositeGrid, Geometry, build_grid  # noqa: E402

__all__ = [
    "CompositeGrid", "DampingCoefficient", "DiscreteOperator", "Geometry", "ModelKind",
    "assemble", "build_grid",
]
