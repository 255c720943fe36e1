"""Composite 1-D mesh of (0, L) split at the interface x = l.

The left segment (0, l) carries the damped sub-equation, the right segment
(l, L) the undamped one.  Nodes are placed exactly at alpha, beta and l so
that the damping indicator is constant on every element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Invalid geometry or element counts."""


@dataclass(frozen=True)
class Geometry:
    l: float
    L: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not (0.0 < self.alpha < self.beta < self.l < self.L):
            raise GeometryError(
                "geometry must satisfy 0 < alpha < beta < l < L, got "
                f"alpha={self.alpha}, beta={self.beta}, l={self.l}, L={self.L}"
            )


@dataclass(frozen=True, eq=False)
class CompositeGrid:
    geometry: Geometry
    node_coords: np.ndarray
    interface_index: int
    damping_range: tuple[int, int]
    # per element: 0 -> left segment (0, l), 1 -> right segment (l, L)
    segment_tags: np.ndarray
    damped: np.ndarray

    LEFT = 0
    RIGHT = 1

    @property
    def n_nodes(self) -> int:
        return self.node_coords.size

    @property
    def n_elements(self) -> int:
        return self.node_coords.size - 1

    @property
    def element_lengths(self) -> np.ndarray:
        return np.diff(self.node_coords)

    def elements(self, segment: int) -> np.ndarray:
        """Indices of the elements on one segment."""
        return np.flatnonzero(self.segment_tags == segment)

    def max_length(self, segment: int) -> float:
        return float(self.element_lengths[self.elements(segment)].max())

    def validate(self) -> None:
        x = self.node_coords
        g = self.geometry
        if not np.all(np.diff(x) > 0):
            raise GeometryError("node coordinates must be strictly increasing")
        if x[0] != 0.0 or x[-1] != g.L:
            raise GeometryError("grid must span [0, L]")
        ia, ib = self.damping_range
        if x[ia] != g.alpha or x[ib] != g.beta or x[self.interface_index] != g.l:
            raise GeometryError("alpha, beta and l must coincide with nodes")
        left = x[:-1] >= g.alpha
        right = x[1:] <= g.beta
        if not np.array_equal(self.damped, left & right):
            raise GeometryError("damped tags inconsistent with [alpha, beta]")


def _snap(nodes: np.ndarray, target: float, forbidden: set[int]) -> int:
    i = int(np.argmin(np.abs(nodes - target)))
    if i in forbidden:
        raise GeometryError(
            f"too few elements to place a distinct node at x={target}"
        )
    nodes[i] = target
    return i


def build_grid(geom: Geometry, n_left: int, n_right: int) -> CompositeGrid:
    """Uniform elements per segment, with the nearest nodes moved onto alpha and beta."""
    if n_left < 4 or n_right < 2:
        raise GeometryError(
            f"need n_left >= 4 and n_right >= 2, got {n_left}, {n_right}"
        )
    left = np.linspace(0.0, geom.l, n_left + 1)
    ia = _snap(left, geom.alpha, {0, n_left})
    ib = _snap(left, geom.beta, {0, n_left, ia})
    if not np.all(np.diff(left) > 0):
        raise GeometryError("snapping alpha/beta produced a degenerate element")
    right = np.linspace(geom.l, geom.L, n_right + 1)
    # exact endpoints regardless of linspace rounding
    left[-1] = geom.l
    right[0], right[-1] = geom.l, geom.L
    x = np.concatenate([left, right[1:]])
    tags = np.concatenate([np.zeros(n_left, int), np.ones(n_right, int)])
    damped = (x[:-1] >= geom.alpha) & (x[1:] <= geom.beta)
    grid = CompositeGrid(geom, x, n_left, (ia, ib), tags, damped)
    grid.validate()
    return grid
