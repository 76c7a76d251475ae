"""Exact 2-d KD-tree mapping predicted coordinates to ranked location ids."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import Location


@dataclass(frozen=True)
class _Node:
    point: int  # row into the index arrays
    axis: int
    left: "_Node | None"
    right: "_Node | None"


class LocationIndex:
    """Immutable KD-tree over location coordinates with id payloads.

    Construction sorts by (x, y, id) first, so the tree does not depend on
    input order. Nodes split at the median on alternating axes; equal
    coordinates are ordered by id so duplicates stay distinct entries.
    """

    __slots__ = ("_xy", "_ids", "_root", "_depth")

    def __init__(self, locations: Iterable[Location]):
        locs = sorted(locations, key=lambda l: (l.x, l.y, l.id))
        if not locs:
            raise ValueError("cannot build a location index from an empty set")
        ids = [l.id for l in locs]
        if len(set(ids)) != len(ids):
            raise ValueError("location ids must be unique")
        xy = np.array([(l.x, l.y) for l in locs], dtype=np.float64)
        xy.setflags(write=False)
        object.__setattr__(self, "_xy", xy)
        object.__setattr__(self, "_ids", tuple(ids))
        root, depth = self._build(list(range(len(locs))), 0)
        object.__setattr__(self, "_root", root)
        object.__setattr__(self, "_depth", depth)

    def __setattr__(self, name, value):
        raise AttributeError("LocationIndex is immutable")

    def _build(self, rows: list[int], depth: int) -> tuple[_Node | None, int]:
        if not rows:
            return None, depth
        axis = depth % 2
        rows = sorted(rows, key=lambda r: (self._xy[r, axis], self._ids[r]))
        mid = len(rows) // 2
        left, dl = self._build(rows[:mid], depth + 1)
        right, dr = self._build(rows[mid + 1:], depth + 1)
        return _Node(rows[mid], axis, left, right), max(dl, dr, depth + 1)

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def depth(self) -> int:
        """Number of nodes on the longest root-to-leaf path."""
        return self._depth

    @property
    def ids(self) -> tuple[int, ...]:
        return self._ids

    def coords(self, loc_id: int) -> tuple[float, float]:
        row = self._ids.index(loc_id)
        return float(self._xy[row, 0]), float(self._xy[row, 1])

    def nearest(self, x: float, y: float, k: int) -> list[int]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValueError(f"query ({x}, {y}) is not finite")
        k = min(k, len(self._ids))
        q = (float(x), float(y))
        # max-heap of the k best as (-d2, -id); the worst kept entry sits on top
        best: list[tuple[float, int]] = []
        # entries carry the squared distance to the splitting plane that
        # separates them from the query; "<=" keeps equal-distance candidates
        # reachable so the smaller-id tie-break stays exact
        stack: list[tuple[_Node | None, float]] = [(self._root, 0.0)]
        while stack:
            node, bound = stack.pop()
            if node is None or (len(best) == k and bound > -best[0][0]):
                continue
            px, py = self._xy[node.point]
            d2 = (px - q[0]) ** 2 + (py - q[1]) ** 2
            key = (-d2, -self._ids[node.point])
            if len(best) < k:
                heapq.heappush(best, key)
            elif key > best[0]:
                heapq.heapreplace(best, key)
            diff = q[node.axis] - (px, py)[node.axis]
            near, far = (node.left, node.right) if diff < 0 else (node.right, node.left)
            stack.append((far, diff * diff))
            stack.append((near, 0.0))
        return [-i for _, i in sorted(best, key=lambda t: (-t[0], -t[1]))]


def build_location_index(locations: Iterable[Location]) -> LocationIndex:
    return LocationIndex(locations)


def nearest_ids(index: LocationIndex, coords: Sequence[float], k: int) -> list[int]:
    """Ids of the k nearest locations, ascending distance, ties by smaller id."""
    x, y = coords
    return index.nearest(x, y, k)

