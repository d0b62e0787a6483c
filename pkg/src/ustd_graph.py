"""
USTD Graph Module

Graph representation shared by forecasting and kriging: adjacency
construction from coordinates or edge lists, renormalized propagation
matrices, per-iteration subgraph sampling for encoder pre-training and
Laplacian-eigenvector spatial embeddings for the denoisers.

All functions are pure given an explicit numpy Generator; Graph values are
read-only after construction.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import eigh
from scipy.spatial.distance import pdist, squareform

from src.ustd_errors import DataFormatError, InputError


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Graph:
    """
    Fixed node set with a non-negative adjacency matrix.

    Attributes:
        adjacency: N×N non-negative matrix A
        coords: Optional N×2 node coordinates
        node_ids: Stable node identifiers, defaults to 0..N-1
    """

    adjacency: np.ndarray
    coords: Optional[np.ndarray] = None
    node_ids: Tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        adjacency = np.asarray(self.adjacency, dtype=np.float64)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise InputError(f"Adjacency must be square, got shape {adjacency.shape}")
        if adjacency.shape[0] < 1:
            raise InputError("Graph must have at least one node")
        if not np.all(np.isfinite(adjacency)) or np.any(adjacency < 0):
            raise InputError("Adjacency entries must be finite and non-negative")
        object.__setattr__(self, "adjacency", _freeze(adjacency))

        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=np.float64)
            if coords.shape != (adjacency.shape[0], 2):
                raise InputError(
                    f"Coordinates must have shape ({adjacency.shape[0]}, 2), "
                    f"got {coords.shape}"
                )
            object.__setattr__(self, "coords", _freeze(coords))

        node_ids = tuple(str(n) for n in self.node_ids)
        if not node_ids:
            node_ids = tuple(str(i) for i in range(adjacency.shape[0]))
        if len(node_ids) != adjacency.shape[0]:
            raise InputError(
                f"Got {len(node_ids)} node ids for {adjacency.shape[0]} nodes"
            )
        object.__setattr__(self, "node_ids", node_ids)

    @property
    def n_nodes(self) -> int:
        """Number of nodes N."""
        return self.adjacency.shape[0]

    def subgraph(self, indices: Sequence[int]) -> "Graph":
        """
        Induced subgraph on the given node indices, in the given order.

        Args:
            indices: Node indices into this graph

        Returns:
            Graph: Induced subgraph carrying matching coordinates and ids
        """
        idx = np.asarray(indices, dtype=np.int64)
        coords = self.coords[idx] if self.coords is not None else None
        return Graph(
            adjacency=self.adjacency[np.ix_(idx, idx)],
            coords=coords,
            node_ids=tuple(self.node_ids[i] for i in idx),
        )


@dataclass(frozen=True, eq=False)
class SubgraphSample:
    """Nodes kept by one graph-sampling draw and their induced adjacency."""

    kept_indices: np.ndarray
    adjacency: np.ndarray


@dataclass(frozen=True, eq=False)
class SpatialEmbedding:
    """Laplacian-eigenvector positional encodings, one row per node."""

    vectors: np.ndarray
    eigenvalues: np.ndarray


def build_adjacency_from_coords(
    coords: np.ndarray,
    sigma: Optional[float] = None,
    epsilon: float = 0.1,
    node_ids: Sequence[str] = (),
) -> Graph:
    """
    Build a thresholded Gaussian-kernel graph from node coordinates.

    A[i][j] = exp(-dist(i, j)² / sigma²) when that value exceeds epsilon,
    else 0, with a zero diagonal.

    Args:
        coords: N×2 coordinates
        sigma: Kernel width; defaults to the std of pairwise distances
        epsilon: Sparsity threshold in [0, 1)
        node_ids: Optional node identifiers

    Returns:
        Graph: The kernel graph, coordinates attached

    Raises:
        InputError: On non-finite coordinates or invalid sigma/epsilon
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise InputError(f"Coordinates must have shape (N, 2), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise InputError("Coordinates must be finite")
    if not 0 <= epsilon < 1:
        raise InputError(f"epsilon must be in [0, 1), got {epsilon}")

    n_nodes = coords.shape[0]
    if n_nodes == 1:
        return Graph(adjacency=np.zeros((1, 1)), coords=coords, node_ids=node_ids)

    condensed = pdist(coords)
    if sigma is None:
        sigma = float(np.std(condensed))
        if sigma == 0.0:
            sigma = 1.0
    if sigma <= 0:
        raise InputError(f"sigma must be positive, got {sigma}")

    dist = squareform(condensed)
    adjacency = np.exp(-(dist ** 2) / sigma ** 2)
    adjacency[adjacency <= epsilon] = 0.0
    np.fill_diagonal(adjacency, 0.0)
    return Graph(adjacency=adjacency, coords=coords, node_ids=node_ids)


def normalize_adjacency(graph: Graph) -> np.ndarray:
    """
    Symmetric renormalized propagation matrix D̃^-1/2 (A + I) D̃^-1/2.

    The self-loop guarantees every degree is at least one.

    Args:
        graph: Input graph

    Returns:
        np.ndarray: N×N normalized matrix
    """
    a_tilde = graph.adjacency + np.eye(graph.n_nodes)
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return inv_sqrt[:, None] * a_tilde * inv_sqrt[None, :]


def sample_subgraph(
    graph: Graph, rate: float, rng: np.random.Generator
) -> SubgraphSample:
    """
    Uniformly sample round(rate × N) nodes without replacement.

    Args:
        graph: Parent graph
        rate: Sampling rate in (0, 1]
        rng: Random generator; the draw is deterministic given its state

    Returns:
        SubgraphSample: Sorted kept indices and the induced adjacency

    Raises:
        InputError: If rate is outside (0, 1] or keeps no node
    """
    if not 0 < rate <= 1:
        raise InputError(f"Sampling rate must be in (0, 1], got {rate}")
    n_keep = int(np.floor(rate * graph.n_nodes + 0.5))
    if n_keep < 1:
        raise InputError(
            f"Sampling rate {rate} keeps no node of a {graph.n_nodes}-node graph"
        )
    kept = np.sort(rng.choice(graph.n_nodes, size=n_keep, replace=False))
    return SubgraphSample(
        kept_indices=kept,
        adjacency=graph.adjacency[np.ix_(kept, kept)],
    )


def laplacian_embedding(
    graph: Graph,
    d_s: int,
    sign_flip: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> SpatialEmbedding:
    """
    Smallest non-trivial eigenvectors of I - D̃^-1/2 (A + I) D̃^-1/2.

    Eigenvectors are ordered by ascending eigenvalue and the first one (the
    trivial eigenvector) is dropped, so disconnected graphs keep their other
    zero-eigenvalue components.

    Args:
        graph: Input graph
        d_s: Number of embedding dimensions, strictly below N
        sign_flip: Flip each column's sign independently at random
        rng: Generator used for the sign flips

    Returns:
        SpatialEmbedding: N×d_s vectors and their eigenvalues

    Raises:
        InputError: If d_s is not in [1, N)
    """
    if d_s < 1 or d_s >= graph.n_nodes:
        raise InputError(
            f"Spatial embedding size must be in [1, {graph.n_nodes}), got {d_s}"
        )
    laplacian = np.eye(graph.n_nodes) - normalize_adjacency(graph)
    laplacian = (laplacian + laplacian.T) / 2.0
    eigenvalues, eigenvectors = eigh(laplacian)
    vectors = eigenvectors[:, 1:d_s + 1]
    values = eigenvalues[1:d_s + 1]

    embedding = SpatialEmbedding(vectors=vectors, eigenvalues=values)
    if sign_flip:
        if rng is None:
            raise InputError("sign_flip requires a random generator")
        embedding = flip_signs(embedding, rng)
    return embedding


def flip_signs(embedding: SpatialEmbedding, rng: np.random.Generator) -> SpatialEmbedding:
    """Copy of the embedding with each column's sign flipped independently at random."""
    signs = rng.choice(np.array([-1.0, 1.0]), size=embedding.vectors.shape[1])
    return SpatialEmbedding(vectors=embedding.vectors * signs[None, :],
                            eigenvalues=embedding.eigenvalues)


def load_edge_list(path: str, n_nodes: int, symmetric: bool = True) -> Graph:
    """
    Load a road-network style adjacency from a ``src,dst,weight`` file.

    Args:
        path: Edge list with 0-indexed node ids
        n_nodes: Number of nodes N
        symmetric: Mirror every edge

    Returns:
        Graph: The adjacency graph

    Raises:
        DataFormatError: If the file is malformed or references unknown nodes
    """
    try:
        edges = pd.read_csv(path, header=None, names=["src", "dst", "weight"],
                            comment="#")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"Could not parse edge list {path}: {e}") from e

    if edges.empty:
        return Graph(adjacency=np.zeros((n_nodes, n_nodes)))
    if edges.isna().any().any():
        raise DataFormatError(f"Edge list {path} has missing fields")

    src = edges["src"].to_numpy(dtype=np.int64)
    dst = edges["dst"].to_numpy(dtype=np.int64)
    weight = edges["weight"].to_numpy(dtype=np.float64)
    if src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= n_nodes:
        raise DataFormatError(
            f"Edge list {path} references nodes outside [0, {n_nodes})"
        )
    if np.any(weight < 0):
        raise DataFormatError(f"Edge list {path} has negative weights")

    adjacency = np.zeros((n_nodes, n_nodes))
    adjacency[src, dst] = weight
    if symmetric:
        adjacency[dst, src] = weight
    return Graph(adjacency=adjacency)


def load_coordinates(path: str) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """
    Load ``node_id,x,y`` coordinates.

    Args:
        path: CSV file with a header row

    Returns:
        Tuple of (N×2 coordinates, node ids)

    Raises:
        DataFormatError: If the file is empty or lacks the required columns
    """
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"Could not parse coordinates {path}: {e}") from e
    missing = {"node_id", "x", "y"} - set(frame.columns)
    if missing or frame.empty:
        raise DataFormatError(
            f"Coordinates file {path} needs columns node_id,x,y and at least one row"
        )
    coords = frame[["x", "y"]].to_numpy(dtype=np.float64)
    return coords, tuple(str(n) for n in frame["node_id"])
