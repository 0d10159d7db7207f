"""Per-cell cache placement under a byte budget."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TextIO

import numpy as np

from .trace import Catalog

BRUTEFORCE_MAX_CONTENTS = 20


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class StorageBudget:
    """Per-cell storage, as a fraction of the whole library's bytes."""

    fraction: float
    total_bytes: int

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise PlacementError(f"storage fraction must be in [0, 1], got {self.fraction}")
        if self.total_bytes < 0:
            raise PlacementError("total_bytes must be >= 0")

    @classmethod
    def for_catalog(cls, fraction: float, catalog: Catalog) -> "StorageBudget":
        return cls(fraction, catalog.total_bytes)

    @property
    def bytes(self) -> int:
        return min(math.floor(self.fraction * self.total_bytes), self.total_bytes)


@dataclass(frozen=True)
class CachePlacement:
    per_cell: tuple[frozenset, ...]
    bytes_used: tuple[int, ...]

    @property
    def num_cells(self) -> int:
        return len(self.per_cell)

    def cached_mask(self, num_contents: int) -> np.ndarray:
        """Boolean N x F matrix, True where the cell caches the content."""
        mask = np.zeros((self.num_cells, num_contents), dtype=bool)
        for n, ids in enumerate(self.per_cell):
            if ids:
                mask[n, list(ids)] = True
        return mask

    def validate(self, catalog: Catalog, budget_bytes: int | None = None) -> None:
        for n, ids in enumerate(self.per_cell):
            if any(not 0 <= f < len(catalog) for f in ids):
                raise PlacementError(f"cell {n} caches an id outside the catalog")
            used = int(catalog.sizes[list(ids)].sum()) if ids else 0
            if used != self.bytes_used[n]:
                raise PlacementError(f"cell {n}: bytes_used {self.bytes_used[n]} != {used}")
            if budget_bytes is not None and used > budget_bytes:
                raise PlacementError(f"cell {n} exceeds its budget: {used} > {budget_bytes}")

    def write_csv(self, stream: TextIO) -> None:
        for n, ids in enumerate(self.per_cell):
            for f in sorted(ids):
                stream.write(f"{n},{f}\n")

    @classmethod
    def read_csv(cls, stream: TextIO, num_cells: int, catalog: Catalog) -> "CachePlacement":
        cells: list[set] = [set() for _ in range(num_cells)]
        for line in stream:
            line = line.strip()
            if line:
                n, f = line.split(",")
                cells[int(n)].add(int(f))
        return cls.from_sets(cells, catalog)

    @classmethod
    def from_sets(cls, sets, catalog: Catalog) -> "CachePlacement":
        per_cell = tuple(frozenset(int(f) for f in s) for s in sets)
        used = tuple(int(catalog.sizes[list(s)].sum()) if s else 0 for s in per_cell)
        return cls(per_cell, used)


def _greedy_row(ratings: np.ndarray, sizes: np.ndarray, budget: int) -> tuple[frozenset, int]:
    # rating desc, then id asc
    order = np.lexsort((np.arange(len(ratings)), -ratings))
    sizes_in_order = sizes[order]
    # once the remainder drops below every size still ahead, nothing else fits
    suffix_min = np.minimum.accumulate(sizes_in_order[::-1])[::-1].tolist()
    remaining = budget
    chosen = []
    for j, (f, size) in enumerate(zip(order.tolist(), sizes_in_order.tolist())):
        if remaining < suffix_min[j]:
            break
        if size <= remaining:
            chosen.append(f)
            remaining -= size
    return frozenset(chosen), budget - remaining


def greedy_place(popularity: np.ndarray, catalog: Catalog, budget: StorageBudget) -> CachePlacement:
    """Cache each cell's most popular contents, skipping any that no longer fit.

    The scan continues past a content that does not fit, so a single large
    object never strands the rest of the budget.
    """
    popularity = np.asarray(popularity, dtype=float)
    if popularity.ndim != 2 or popularity.shape[1] != len(catalog):
        raise PlacementError(f"popularity must be N x {len(catalog)}, got {popularity.shape}")
    limit = budget.bytes
    rows = [_greedy_row(row, catalog.sizes, limit) for row in popularity]
    return CachePlacement(tuple(r[0] for r in rows), tuple(r[1] for r in rows))


def nestedness_check(p_small: CachePlacement, p_large: CachePlacement) -> bool:
    """True iff every cell's small-budget cache is a subset of its large-budget cache."""
    if p_small.num_cells != p_large.num_cells:
        raise PlacementError("placements cover different numbers of cells")
    return all(a <= b for a, b in zip(p_small.per_cell, p_large.per_cell))


def optimal_place_bruteforce(
    popularity_row, catalog: Catalog, budget_bytes: int, objective: str = "hit-count"
) -> frozenset:
    """Exact best feasible subset for one cell, by enumeration.

    ``hit-count`` maximizes the summed rating, ``offload-bytes`` the summed
    rating x size. Ties go to the lexicographically smallest sorted id tuple.
    """
    row = np.asarray(popularity_row, dtype=float)
    F = len(catalog)
    if row.shape != (F,):
        raise PlacementError(f"popularity row must have length {F}")
    if F > BRUTEFORCE_MAX_CONTENTS:
        raise PlacementError(f"brute force limited to {BRUTEFORCE_MAX_CONTENTS} contents, got {F}")
    if objective == "hit-count":
        weight = row
    elif objective == "offload-bytes":
        weight = row * catalog.sizes
    else:
        raise PlacementError(f"unknown objective {objective!r}")

    masks = np.arange(1 << F, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(F)) & 1).astype(bool)
    used = bits @ catalog.sizes
    value = bits @ weight
    feasible = used <= budget_bytes
    best = value[feasible].max()
    tol = 1e-12 * max(1.0, abs(best))
    winners = np.flatnonzero(feasible & (value >= best - tol))
    candidates = [tuple(np.flatnonzero(bits[m]).tolist()) for m in winners]
    return frozenset(min(candidates))
