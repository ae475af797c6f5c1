"""Spatial populations, distance kernels and k-nearest-neighbour graphs."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._errors import InvalidPopulationError, SingularDistanceError
from .rng import check_rng

__all__ = [
    "Population",
    "SpatialGraph",
    "generate_uniform",
    "generate_clustered",
    "pairwise_kernel",
    "knn_graph",
    "mean_initial_pressure",
    "read_population",
    "write_population",
]


@dataclass(frozen=True, eq=False)
class Population:
    """Fixed set of individual locations.

    Parameters
    ----------
    coords : array of shape (M, 2)
        Individual coordinates; row ``i`` is individual ``i``.
    region : tuple (xmin, ymin, xmax, ymax), optional
        Bounding box of the study area. Defaults to the coordinates'
        bounding box.

    The pairwise distance matrix is computed once at construction. Its
    diagonal holds ``inf`` so that any negative power of it has a zero
    diagonal (no self-pressure).
    """

    coords: np.ndarray
    region: tuple = None
    distances: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidPopulationError(f"coords must have shape (M, 2), got {coords.shape}")
        if coords.shape[0] < 2:
            raise InvalidPopulationError(f"population needs M >= 2 individuals, got {coords.shape[0]}")
        if not np.all(np.isfinite(coords)):
            raise InvalidPopulationError("coordinates must be finite")
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if np.any(dist == 0.0):
            i, j = np.argwhere(dist == 0.0)[0]
            raise SingularDistanceError(f"individuals {i} and {j} share coordinates {coords[i]}")
        coords.setflags(write=False)
        dist.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "distances", dist)
        if self.region is None:
            lo, hi = coords.min(0), coords.max(0)
            object.__setattr__(self, "region", (lo[0], lo[1], hi[0], hi[1]))
        else:
            object.__setattr__(self, "region", tuple(float(v) for v in self.region))

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    def __len__(self) -> int:
        return self.size

    @property
    def side(self) -> float:
        """Largest side of the bounding region, used to normalise coordinates."""
        xmin, ymin, xmax, ymax = self.region
        return max(xmax - xmin, ymax - ymin)

    def normalised_coords(self) -> np.ndarray:
        xmin, ymin, _, _ = self.region
        return (self.coords - np.array([xmin, ymin])) / self.side

    def fingerprint(self) -> str:
        return hashlib.sha256(self.coords.tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class SpatialGraph:
    """Directed k-NN graph: ``neighbours[i]`` lists the k nearest nodes of ``i``."""

    neighbours: np.ndarray
    k: int

    @property
    def n_nodes(self) -> int:
        return self.neighbours.shape[0]

    def edges(self) -> np.ndarray:
        """Edge list of shape (M*k, 2) as ``(node, neighbour)`` rows."""
        src = np.repeat(np.arange(self.n_nodes), self.k)
        return np.stack([src, self.neighbours.ravel()], axis=1)


def generate_uniform(M: int, side: float, seed=None) -> Population:
    """``M`` i.i.d. uniform points in ``[0, side]^2``."""
    if M < 2:
        raise InvalidPopulationError(f"population needs M >= 2 individuals, got {M}")
    if not side > 0:
        raise ValueError(f"side must be positive, got {side}")
    rng = check_rng(seed)
    return Population(rng.uniform(0.0, side, size=(M, 2)), region=(0.0, 0.0, side, side))


def generate_clustered(M: int, n_clusters: int, spread: float, seed=None, side: float = 100.0) -> Population:
    """Gaussian clusters around uniform centres, clipped to ``[0, side]^2``.

    Synthetic stand-in for an irregular farm layout.
    """
    if M < 2:
        raise InvalidPopulationError(f"population needs M >= 2 individuals, got {M}")
    if n_clusters < 1:
        raise ValueError(f"n_clusters must be >= 1, got {n_clusters}")
    if not spread > 0:
        raise ValueError(f"spread must be positive, got {spread}")
    rng = check_rng(seed)
    centres = rng.uniform(0.0, side, size=(n_clusters, 2))
    labels = rng.integers(0, n_clusters, size=M)
    coords = centres[labels] + rng.normal(0.0, spread, size=(M, 2))
    # redraw escaped points (plain clipping stacks them on corners); clip as last resort
    for _ in range(100):
        out = np.any((coords < 0.0) | (coords > side), axis=1)
        if not out.any():
            break
        coords[out] = centres[labels[out]] + rng.normal(0.0, spread, size=(out.sum(), 2))
    coords = np.clip(coords, 0.0, side)
    return Population(coords, region=(0.0, 0.0, side, side))


def pairwise_kernel(pop: Population, beta: float) -> np.ndarray:
    """Matrix of ``d_ij^-beta`` with a zero diagonal."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return pop.distances ** (-beta)


def knn_graph(pop: Population, k: int) -> SpatialGraph:
    """k-nearest-neighbour digraph; ties go to the lower node index."""
    M = pop.size
    if not 1 <= k <= M - 1:
        raise ValueError(f"k must lie in [1, {M - 1}], got {k}")
    # stable sort on distance keeps lower indices first among equal distances
    order = np.argsort(pop.distances, axis=1, kind="stable")[:, :k]
    return SpatialGraph(neighbours=order.astype(np.int64), k=k)


def mean_initial_pressure(pop: Population, seeds, beta: float) -> float:
    """Average pressure exerted by the initial infectives on everyone else."""
    seeds = np.unique(np.asarray(seeds, dtype=np.int64))
    if seeds.size == 0:
        raise ValueError("seed set is empty")
    if seeds.min() < 0 or seeds.max() >= pop.size:
        raise ValueError("seed index outside the population")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    others = np.setdiff1d(np.arange(pop.size), seeds)
    if others.size == 0:
        return 0.0
    return float((pop.distances[np.ix_(seeds, others)] ** (-beta)).sum() / seeds.size)


def write_population(pop: Population, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y"])
        for i, (x, y) in enumerate(pop.coords):
            w.writerow([i, repr(float(x)), repr(float(y))])


def read_population(path, region=None) -> Population:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "x", "y"]:
            raise InvalidPopulationError(f"{path}: expected header 'id,x,y'")
        rows = [(int(r["id"]), float(r["x"]), float(r["y"])) for r in reader]
    rows.sort()
    ids = [r[0] for r in rows]
    if ids != list(range(len(ids))):
        raise InvalidPopulationError(f"{path}: ids must be 0..M-1")
    return Population(np.array([[r[1], r[2]] for r in rows]), region=region)
