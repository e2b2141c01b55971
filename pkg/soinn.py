"""n-SOINN: self-organizing incremental neural network with a win cap.

A SoinnNetwork grows a graph of prototype nodes from a stream of vectors.
Each input either creates a node (outside the similarity thresholds of its
two nearest nodes) or pulls the win-receiving node and its neighbours toward
it. Edges age when their endpoint wins without refreshing them; aged edges are
dropped and isolated nodes are purged every `lambda_` inputs.

With `n > 0` a first winner that has already won more than n times passes the
win to the second winner, and a new node is created when both are saturated.
`n = 0` disables that rule and the network is the classic single-layer SOINN.
Distances are squared Euclidean throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


class SoinnError(ValueError):
    """Raised for invalid parameters or inputs to a SoinnNetwork."""


@dataclass(frozen=True)
class SoinnParams:
    """Network parameters.

    Attributes:
        n: Win cap; 0 disables the cap.
        age_max: Edges older than this are removed.
        lambda_: Cleanup runs every lambda_ inputs.
        neighbor_rate_divisor: Neighbours learn at 1 / (divisor * M_winner).
    """

    n: int = 0
    age_max: int = 100
    lambda_: int = 100
    neighbor_rate_divisor: float = 100.0

    def __post_init__(self):
        if self.n < 0:
            raise SoinnError(f"n must be >= 0, got {self.n}")
        if self.age_max < 1:
            raise SoinnError(f"age_max must be >= 1, got {self.age_max}")
        if self.lambda_ < 1:
            raise SoinnError(f"lambda must be >= 1, got {self.lambda_}")
        if not self.neighbor_rate_divisor > 0:
            raise SoinnError(
                f"neighbor_rate_divisor must be > 0, got {self.neighbor_rate_divisor}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "age_max": self.age_max,
            "lambda": self.lambda_,
            "neighbor_rate_divisor": self.neighbor_rate_divisor,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SoinnParams:
        return cls(
            n=int(data["n"]),
            age_max=int(data["age_max"]),
            lambda_=int(data["lambda"]),
            neighbor_rate_divisor=float(data["neighbor_rate_divisor"]),
        )


@dataclass(frozen=True)
class SoinnNode:
    """Snapshot of one node."""

    id: int
    weight: np.ndarray
    win_count: int


@dataclass(frozen=True)
class SoinnEdge:
    """Snapshot of one edge; endpoints are stored with a < b."""

    a: int
    b: int
    age: int


@dataclass(frozen=True)
class NodeCreated:
    node_id: int


@dataclass(frozen=True)
class WinnerUpdated:
    winner_id: int


def squared_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance.

    Raises:
        SoinnError: On dimension mismatch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SoinnError(f"Dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.dot(diff, diff))


def _edge_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


class SoinnNetwork:
    """Incremental topology-learning graph over d-dimensional inputs.

    Node weights live in one (count, d) array whose rows follow ascending node
    id, so argmin over rows breaks distance ties by the smaller id.
    """

    def __init__(self, dimension: int, params: SoinnParams | None = None):
        """Initialize an empty network.

        Args:
            dimension: Input dimension d.
            params: Network parameters (defaults when omitted).
        """
        if dimension < 1:
            raise SoinnError(f"dimension must be >= 1, got {dimension}")
        self.dimension = dimension
        self.params = params or SoinnParams()
        self.inputs_seen = 0

        self._next_id = 0
        self._ids: list[int] = []
        self._row: dict[int, int] = {}
        self._weights = np.empty((0, dimension), dtype=np.float64)
        self._wins = np.empty(0, dtype=np.int64)

        # (a, b) with a < b -> age
        self._edges: dict[tuple[int, int], int] = {}
        self._neighbors: dict[int, set[int]] = {}

    # =========================================================================
    # Read-only views
    # =========================================================================

    @property
    def node_count(self) -> int:
        return len(self._ids)

    @property
    def edge_count(self) -> int:
        return len(self._edges)

    @property
    def total_wins(self) -> int:
        return int(self._wins.sum())

    @property
    def node_ids(self) -> list[int]:
        return list(self._ids)

    @property
    def nodes(self) -> list[SoinnNode]:
        return [
            SoinnNode(id=node_id, weight=self._weights[row].copy(), win_count=int(self._wins[row]))
            for row, node_id in enumerate(self._ids)
        ]

    @property
    def edges(self) -> list[SoinnEdge]:
        return [SoinnEdge(a, b, age) for (a, b), age in sorted(self._edges.items())]

    def weight(self, node_id: int) -> np.ndarray:
        return self._weights[self._require(node_id)].copy()

    def win_count(self, node_id: int) -> int:
        return int(self._wins[self._require(node_id)])

    def neighbors(self, node_id: int) -> set[int]:
        self._require(node_id)
        return set(self._neighbors[node_id])

    def edge_age(self, a: int, b: int) -> int | None:
        return self._edges.get(_edge_key(a, b))

    def _require(self, node_id: int) -> int:
        row = self._row.get(node_id)
        if row is None:
            raise SoinnError(f"Unknown node id {node_id}")
        return row

    # =========================================================================
    # Core operations
    # =========================================================================

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dimension,):
            raise SoinnError(f"Expected input of dimension {self.dimension}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise SoinnError("Input has non-finite components")
        return x

    def _distances(self, x: np.ndarray) -> np.ndarray:
        diff = self._weights - x
        return np.einsum("ij,ij->i", diff, diff)

    def find_winners(self, x) -> tuple[int, int]:
        """Return the ids of the nearest and second-nearest nodes.

        Raises:
            SoinnError: If the network has fewer than two nodes.
        """
        if self.node_count < 2:
            raise SoinnError("find_winners needs at least 2 nodes")
        x = self._check_input(x)
        dist = self._distances(x)
        first = int(np.argmin(dist))
        dist[first] = np.inf
        second = int(np.argmin(dist))
        return self._ids[first], self._ids[second]

    def similarity_threshold(self, node_id: int) -> float:
        """Max squared distance to neighbours, or min to any other node if isolated.

        Raises:
            SoinnError: On an unknown id or a network with fewer than two nodes.
        """
        row = self._require(node_id)
        if self.node_count < 2:
            raise SoinnError("similarity_threshold needs at least 2 nodes")
        dist = self._distances(self._weights[row])
        neighbors = self._neighbors[node_id]
        if neighbors:
            return float(max(dist[self._row[j]] for j in neighbors))
        dist[row] = np.inf
        return float(dist.min())

    def process_input(self, x) -> NodeCreated | WinnerUpdated:
        """Feed one input vector and return what happened.

        Raises:
            SoinnError: On dimension mismatch or non-finite components.
        """
        x = self._check_input(x)
        self.inputs_seen += 1

        if self.node_count < 2:
            return NodeCreated(self._add_node(x))

        s1, s2 = self.find_winners(x)
        if (
            squared_distance(x, self._weights[self._row[s1]]) > self.similarity_threshold(s1)
            or squared_distance(x, self._weights[self._row[s2]]) > self.similarity_threshold(s2)
        ):
            event: NodeCreated | WinnerUpdated = NodeCreated(self._add_node(x))
        else:
            winner = self._select_winner(s1, s2)
            if winner is None:
                event = NodeCreated(self._add_node(x))
            else:
                self._connect_and_age(s1, s2, winner)
                self._learn(winner, x)
                event = WinnerUpdated(winner)

        if self.inputs_seen % self.params.lambda_ == 0:
            self.cleanup()
        return event

    def _select_winner(self, s1: int, s2: int) -> int | None:
        """Apply the win cap; None means both winners are saturated."""
        n = self.params.n
        if n == 0 or self._wins[self._row[s1]] <= n:
            return s1
        if self._wins[self._row[s2]] <= n:
            return s2
        return None

    def _connect_and_age(self, s1: int, s2: int, winner: int) -> None:
        key = _edge_key(s1, s2)
        if key not in self._edges:
            self._neighbors[s1].add(s2)
            self._neighbors[s2].add(s1)
        self._edges[key] = 0

        for j in list(self._neighbors[winner]):
            other = _edge_key(winner, j)
            if other == key:
                continue
            self._edges[other] += 1
            if self._edges[other] > self.params.age_max:
                self._remove_edge(*other)

    def _learn(self, winner: int, x: np.ndarray) -> None:
        row = self._row[winner]
        self._wins[row] += 1
        wins = self._wins[row]
        self._weights[row] += (x - self._weights[row]) / wins
        rate = 1.0 / (self.params.neighbor_rate_divisor * wins)
        for j in sorted(self._neighbors[winner]):
            r = self._row[j]
            self._weights[r] += rate * (x - self._weights[r])

    def cleanup(self) -> int:
        """Drop over-aged edges, then isolated nodes (keeping at least two nodes).

        Returns:
            Number of nodes removed.
        """
        for key, age in list(self._edges.items()):
            if age > self.params.age_max:
                self._remove_edge(*key)

        isolated = [node_id for node_id in self._ids if not self._neighbors[node_id]]
        if not isolated:
            return 0

        connected = self.node_count - len(isolated)
        keep = max(0, 2 - connected)
        if keep:
            # Highest win counts survive, smaller id first on ties
            by_wins = sorted(isolated, key=lambda i: (-self._wins[self._row[i]], i))
            isolated = sorted(by_wins[keep:])
        if isolated:
            self._remove_nodes(isolated)
            logger.debug("cleanup removed %d isolated nodes", len(isolated))
        return len(isolated)

    def export_nodes(self) -> list[np.ndarray]:
        """Copy of all node weights ordered by node id."""
        return [row.copy() for row in self._weights]

    def export_matrix(self) -> np.ndarray:
        """Node weights as a (node_count, d) array ordered by node id."""
        return self._weights.copy()

    def connected_components(self) -> int:
        """Number of connected components of the node/edge graph."""
        parent = {node_id: node_id for node_id in self._ids}

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        components = len(parent)
        for a, b in self._edges:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
                components -= 1
        return components

    # =========================================================================
    # Graph mutation helpers
    # =========================================================================

    def _add_node(self, weight: np.ndarray, win_count: int = 0, node_id: int | None = None) -> int:
        if node_id is None:
            node_id = self._next_id
        self._next_id = max(self._next_id, node_id + 1)
        self._row[node_id] = len(self._ids)
        self._ids.append(node_id)
        self._weights = np.vstack([self._weights, weight[np.newaxis, :]])
        self._wins = np.append(self._wins, win_count)
        self._neighbors[node_id] = set()
        return node_id

    def _remove_edge(self, a: int, b: int) -> None:
        del self._edges[_edge_key(a, b)]
        self._neighbors[a].discard(b)
        self._neighbors[b].discard(a)

    def _remove_nodes(self, node_ids: list[int]) -> None:
        doomed = set(node_ids)
        for node_id in doomed:
            for j in list(self._neighbors[node_id]):
                self._remove_edge(node_id, j)
            del self._neighbors[node_id]
        keep_rows = [row for row, node_id in enumerate(self._ids) if node_id not in doomed]
        self._ids = [self._ids[row] for row in keep_rows]
        self._weights = self._weights[keep_rows]
        self._wins = self._wins[keep_rows]
        self._row = {node_id: row for row, node_id in enumerate(self._ids)}

    # =========================================================================
    # Snapshot
    # =========================================================================

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": SNAPSHOT_VERSION,
            "dimension": self.dimension,
            "params": self.params.to_dict(),
            "inputs_seen": self.inputs_seen,
            "next_id": self._next_id,
            "nodes": [
                {"id": node_id, "weight": self._weights[row].tolist(), "wins": int(self._wins[row])}
                for row, node_id in enumerate(self._ids)
            ],
            "edges": [[a, b, age] for (a, b), age in sorted(self._edges.items())],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SoinnNetwork:
        if data.get("version") != SNAPSHOT_VERSION:
            raise SoinnError(
                f"SOINN snapshot version {data.get('version')} != {SNAPSHOT_VERSION}"
            )
        net = cls(int(data["dimension"]), SoinnParams.from_dict(data["params"]))
        net.inputs_seen = int(data["inputs_seen"])
        for node in sorted(data["nodes"], key=lambda n: n["id"]):
            net._add_node(
                np.asarray(node["weight"], dtype=np.float64),
                win_count=int(node["wins"]),
                node_id=int(node["id"]),
            )
        net._next_id = int(data["next_id"])
        for a, b, age in data["edges"]:
            if a == b or a not in net._row or b not in net._row:
                raise SoinnError(f"Snapshot edge ({a}, {b}) is invalid")
            net._edges[_edge_key(a, b)] = int(age)
            net._neighbors[a].add(b)
            net._neighbors[b].add(a)
        return net
