"""Crystal structure -> graph: periodic neighbor search and edge featurization.

Each atom is connected to its nearest periodic images within a cutoff radius,
capped at a maximum neighbor count; edge distances are expanded over a grid
of Gaussian basis functions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .structures import CrystalStructure


class GraphError(Exception):
    """Base class for graph construction problems."""


class IsolatedAtom(GraphError):
    def __init__(self, atom_indices):
        self.atom_indices = list(atom_indices)
        super().__init__(
            f"atoms {self.atom_indices} have no neighbor within the cutoff radius")


class MissingTableEntry(GraphError):
    def __init__(self, z: int):
        self.z = z
        super().__init__(f"node feature table has no entry for atomic number {z}")


@dataclass
class GraphConfig:
    radius: float = 8.0
    max_neighbors: int = 12
    mu_min: float = 0.0
    mu_max: float = 8.0
    mu_step: float = 0.2
    sigma: float = 0.2
    node_feature_mode: str = "learned-embedding"
    feature_table: str | None = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")
        if self.mu_step <= 0 or self.sigma <= 0:
            raise ValueError("mu_step and sigma must be positive")
        if self.mu_max <= self.mu_min:
            raise ValueError("mu_max must exceed mu_min")
        if self.node_feature_mode not in ("learned-embedding", "external-table"):
            raise ValueError(f"bad node_feature_mode {self.node_feature_mode!r}")

    @property
    def n_centers(self) -> int:
        # the 1e-9 absorbs float noise so an exactly divisible span keeps
        # both endpoints (0..8 by 0.2 -> 41 centers)
        return int(math.floor((self.mu_max - self.mu_min) / self.mu_step + 1e-9)) + 1

    @property
    def centers(self) -> np.ndarray:
        return self.mu_min + self.mu_step * np.arange(self.n_centers)


@dataclass
class CrystalGraph:
    """Periodic graph: directed edges from each anchor atom to its neighbors."""

    node_z: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    images: np.ndarray
    distances: np.ndarray
    edge_features: np.ndarray
    crystal_id: str = ""
    node_masked: np.ndarray = field(default=None)
    edge_masked: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.node_masked is None:
            self.node_masked = np.zeros(len(self.node_z), dtype=bool)
        if self.edge_masked is None:
            self.edge_masked = np.zeros(len(self.src), dtype=bool)

    @property
    def n_nodes(self) -> int:
        return len(self.node_z)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def copy(self) -> "CrystalGraph":
        return CrystalGraph(
            node_z=self.node_z.copy(),
            src=self.src.copy(),
            dst=self.dst.copy(),
            images=self.images.copy(),
            distances=self.distances.copy(),
            edge_features=self.edge_features.copy(),
            crystal_id=self.crystal_id,
            node_masked=self.node_masked.copy(),
            edge_masked=self.edge_masked.copy(),
        )


def frac_to_cart(structure: CrystalStructure) -> np.ndarray:
    """Cartesian coordinates in angstroms: row vector times lattice matrix."""
    return structure.frac_coords @ structure.lattice


def _image_ranges(lattice: np.ndarray, radius: float) -> tuple[int, int, int]:
    # plane spacing along each axis bounds how far images can reach
    inv = np.linalg.inv(lattice)
    heights = 1.0 / np.linalg.norm(inv, axis=0)
    return tuple(int(math.ceil(radius / h)) + 1 for h in heights)


def neighbor_list(structure: CrystalStructure, cfg: GraphConfig
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All periodic neighbors within the cutoff, at most max_neighbors each.

    Returns (src, dst, images, distances) in anchor-major order. Candidates
    are sorted by distance with ties broken by (neighbor index, image vector)
    lexicographically, then truncated to max_neighbors per anchor.
    """
    cart = frac_to_cart(structure)
    n = structure.n_sites
    na, nb, nc = _image_ranges(structure.lattice, cfg.radius)
    grids = np.meshgrid(np.arange(-na, na + 1), np.arange(-nb, nb + 1),
                        np.arange(-nc, nc + 1), indexing="ij")
    offsets = np.stack([g.ravel() for g in grids], axis=1)
    shifts = offsets @ structure.lattice

    # disp[i, j, o] = r_j + shift_o - r_i
    disp = cart[None, :, None, :] + shifts[None, None, :, :] - cart[:, None, None, :]
    dist = np.sqrt((disp * disp).sum(axis=-1))
    within = (dist > 0.0) & (dist <= cfg.radius)

    anchor_idx, neigh_idx, off_idx = np.nonzero(within)
    d = dist[anchor_idx, neigh_idx, off_idx]
    img = offsets[off_idx]

    order = np.lexsort((img[:, 2], img[:, 1], img[:, 0], neigh_idx, d, anchor_idx))
    anchor_idx, neigh_idx, img, d = (anchor_idx[order], neigh_idx[order],
                                     img[order], d[order])

    starts = np.searchsorted(anchor_idx, np.arange(n), side="left")
    ends = np.searchsorted(anchor_idx, np.arange(n), side="right")
    isolated = np.nonzero(starts == ends)[0]
    if len(isolated):
        raise IsolatedAtom(isolated.tolist())

    keep = np.concatenate([
        np.arange(s, min(s + cfg.max_neighbors, e)) for s, e in zip(starts, ends)])
    return (anchor_idx[keep].astype(np.int64), neigh_idx[keep].astype(np.int64),
            img[keep].astype(np.int64), d[keep])


def gaussian_expand(distances: np.ndarray, cfg: GraphConfig) -> np.ndarray:
    """exp(-(d - mu_k)^2 / sigma^2) over the center grid; no clipping, so
    negative distances (possible after noising) are fine."""
    d = np.asarray(distances, dtype=np.float64)
    diff = d[:, None] - cfg.centers[None, :]
    return np.exp(-(diff * diff) / (cfg.sigma * cfg.sigma))


@dataclass
class FeatureTable:
    rows: dict[int, np.ndarray]
    width: int

    def lookup(self, z: int) -> np.ndarray:
        if z not in self.rows:
            raise MissingTableEntry(z)
        return self.rows[z]


def load_feature_table(path) -> FeatureTable:
    """Read an external node-feature table: CSV header z,f0,f1,... ."""
    rows: dict[int, np.ndarray] = {}
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0].strip() != "z":
            raise GraphError("feature table must start with header z,f0,f1,...")
        width = len(header) - 1
        if width < 1:
            raise GraphError("feature table needs at least one feature column")
        for row in reader:
            if not row:
                continue
            if len(row) - 1 != width:
                raise GraphError(f"feature table row width {len(row) - 1} != {width}")
            rows[int(row[0])] = np.array([float(x) for x in row[1:]])
    return FeatureTable(rows=rows, width=width)


@dataclass
class NodeFeatures:
    """Resolved initial node features for the encoder.

    learned-embedding mode passes atomic numbers through as embedding-table
    indices; external-table mode materializes fixed per-element vectors.
    """

    mode: str
    indices: np.ndarray | None = None
    matrix: np.ndarray | None = None


def init_node_features(node_z: np.ndarray, mode: str,
                       table: FeatureTable | None = None) -> NodeFeatures:
    node_z = np.asarray(node_z, dtype=np.int64)
    if mode == "learned-embedding":
        return NodeFeatures(mode=mode, indices=node_z)
    if mode == "external-table":
        if table is None:
            raise GraphError("external-table mode requires a feature table")
        matrix = np.stack([table.lookup(int(z)) for z in node_z])
        return NodeFeatures(mode=mode, matrix=matrix)
    raise ValueError(f"bad node feature mode {mode!r}")


def build_graph(structure: CrystalStructure, cfg: GraphConfig,
                feature_table: FeatureTable | None = None) -> CrystalGraph:
    """Neighbor search plus Gaussian edge features; deterministic."""
    src, dst, images, distances = neighbor_list(structure, cfg)
    edge_features = gaussian_expand(distances, cfg)
    # fail fast if the external table cannot cover this structure
    init_node_features(structure.atomic_numbers, cfg.node_feature_mode, feature_table)
    return CrystalGraph(
        node_z=structure.atomic_numbers.copy(),
        src=src,
        dst=dst,
        images=images,
        distances=distances,
        edge_features=edge_features,
        crystal_id=structure.id,
    )
