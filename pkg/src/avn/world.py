"""Synthetic navigation worlds, explored-graph bookkeeping and the shortest-path oracle.

A world is a seeded random geometric graph: viewpoints scattered in a square,
joined to their nearest neighbours under degree caps and bridged into a single
component.  Every node carries a landmark id (shared across nodes on purpose,
so that instructions can be ambiguous) and a Gaussian appearance vector.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GenerationError, GraphLookupError, NoPathError

WORLD_SCHEMA = "avn-world"
WORLD_VERSION = 1

UNOBSERVED, NAVIGABLE, VISITED = 0, 1, 2
FLAG_NAMES = {UNOBSERVED: "unobserved", NAVIGABLE: "navigable", VISITED: "visited"}


@dataclass(frozen=True)
class WorldConfig:
    min_nodes: int = 30
    max_nodes: int = 60
    min_degree: int = 2
    max_degree: int = 5
    k_nearest: int = 4
    size: float = 20.0
    n_landmarks: int = 44
    shared_landmark_prob: float = 0.5
    feature_dim: int = 32
    feature_scale: float = 0.1


@dataclass(eq=False)
class World:
    """Immutable ground-truth world.  ``adj[u]`` maps neighbour id -> edge length."""

    positions: np.ndarray
    landmarks: np.ndarray
    features: np.ndarray
    adj: list[dict[int, float]]
    seed: int = 0
    cfg: WorldConfig = field(default_factory=WorldConfig)
    world_id: str = ""
    _dist_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.adj)

    def neighbors(self, u: int) -> list[int]:
        self._check(u)
        return sorted(self.adj[u])

    def edges(self) -> list[tuple[int, int, float]]:
        return [(u, v, w) for u in range(self.n_nodes) for v, w in sorted(self.adj[u].items()) if u < v]

    def max_degree(self) -> int:
        return max(len(a) for a in self.adj)

    def distance(self, u: int, v: int) -> float:
        return float(math.dist(self.positions[u], self.positions[v]))

    def _check(self, u):
        if not (isinstance(u, (int, np.integer)) and 0 <= u < self.n_nodes):
            raise GraphLookupError(f"unknown node id {u!r} (world has {self.n_nodes} nodes)")

    def distances_to(self, target: int) -> np.ndarray:
        """Dijkstra distances from every node to ``target`` (cached per target)."""
        self._check(target)
        cached = self._dist_cache.get(target)
        if cached is not None:
            return cached
        dist = np.full(self.n_nodes, np.inf)
        dist[target] = 0.0
        heap = [(0.0, target)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for v, w in self.adj[u].items():
                nd = d + w
                if nd < dist[v]:
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        dist.setflags(write=False)
        self._dist_cache[target] = dist
        return dist

    def to_dict(self) -> dict:
        return {
            "schema": WORLD_SCHEMA,
            "version": WORLD_VERSION,
            "world_id": self.world_id,
            "nodes": [
                {"id": i, "position": self.positions[i].tolist(), "landmark": int(self.landmarks[i]),
                 "feature": self.features[i].tolist()}
                for i in range(self.n_nodes)
            ],
            "edges": [[u, v, w] for u, v, w in self.edges()],
            "meta": {"seed": self.seed, "cfg": asdict(self.cfg)},
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "World":
        if blob.get("schema") != WORLD_SCHEMA or blob.get("version") != WORLD_VERSION:
            raise GenerationError(f"unsupported world schema {blob.get('schema')!r} v{blob.get('version')!r}")
        nodes = sorted(blob["nodes"], key=lambda n: n["id"])
        adj: list[dict[int, float]] = [{} for _ in nodes]
        for u, v, w in blob["edges"]:
            adj[u][v] = w
            adj[v][u] = w
        return cls(
            positions=np.array([n["position"] for n in nodes], dtype=np.float64),
            landmarks=np.array([n["landmark"] for n in nodes], dtype=np.int64),
            features=np.array([n["feature"] for n in nodes], dtype=np.float64),
            adj=adj,
            seed=blob["meta"]["seed"],
            cfg=WorldConfig(**blob["meta"]["cfg"]),
            world_id=blob.get("world_id", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _components(adj):
    comp = [-1] * len(adj)
    c = 0
    for s in range(len(adj)):
        if comp[s] >= 0:
            continue
        stack = [s]
        comp[s] = c
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if comp[v] < 0:
                    comp[v] = c
                    stack.append(v)
        c += 1
    return comp, c


def _assign_landmarks(rng, n_nodes, cfg: WorldConfig) -> np.ndarray:
    labels: list[int] = []
    while len(labels) < n_nodes:
        for lm in rng.permutation(cfg.n_landmarks):
            mult = int(rng.integers(2, 4)) if rng.random() < cfg.shared_landmark_prob else 1
            labels.extend([int(lm)] * mult)
    labels = labels[:n_nodes]
    return np.array(rng.permutation(labels), dtype=np.int64)


def generate_world(seed: int, cfg: WorldConfig = WorldConfig(), world_id: str = "") -> World:
    """Seeded connected geometric graph honouring ``cfg``'s degree bounds."""
    if cfg.min_nodes < 4 or cfg.max_nodes < cfg.min_nodes:
        raise GenerationError(f"node count bounds [{cfg.min_nodes}, {cfg.max_nodes}] invalid (need >= 4)")
    if cfg.min_degree < 2 or cfg.max_degree < cfg.min_degree:
        raise GenerationError(f"degree bounds [{cfg.min_degree}, {cfg.max_degree}] invalid (need 2 <= min <= max)")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.min_nodes, cfg.max_nodes + 1))
    if cfg.min_degree > n - 1:
        raise GenerationError(f"min_degree {cfg.min_degree} impossible with {n} nodes")
    pos = rng.uniform(0.0, cfg.size, size=(n, 2))
    d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    if not (d > 0).all():
        raise GenerationError("coincident viewpoints")
    adj: list[dict[int, float]] = [{} for _ in range(n)]

    def link(u, v):
        adj[u][v] = float(d[u, v])
        adj[v][u] = float(d[u, v])

    order = np.argsort(d, axis=1, kind="stable")
    target = min(max(cfg.k_nearest, cfg.min_degree), cfg.max_degree)
    for u in range(n):
        for v in order[u][: n - 1]:
            if len(adj[u]) >= target:
                break
            if v not in adj[u] and len(adj[v]) < cfg.max_degree:
                link(u, int(v))
    comp, k = _components(adj)
    while k > 1:
        # bridge the closest cross-component pair with spare degree
        best = None
        for u in range(n):
            if len(adj[u]) >= cfg.max_degree:
                continue
            for v in order[u][: n - 1]:
                v = int(v)
                if comp[v] != comp[u] and len(adj[v]) < cfg.max_degree:
                    if best is None or d[u, v] < d[best]:
                        best = (u, v)
                    break
        if best is None:
            raise GenerationError("cannot connect components within max_degree")
        link(*best)
        comp, k = _components(adj)
    degrees = [len(a) for a in adj]
    if min(degrees) < cfg.min_degree or max(degrees) > cfg.max_degree:
        raise GenerationError(f"degree constraints unsatisfied: {min(degrees)}..{max(degrees)}")
    landmarks = _assign_landmarks(rng, n, cfg)
    features = rng.normal(scale=cfg.feature_scale, size=(n, cfg.feature_dim))
    return World(pos, landmarks, features, adj, seed=seed, cfg=cfg, world_id=world_id or f"w{seed}")


# -- explored graph ---------------------------------------------------------

@dataclass(frozen=True)
class AgentState:
    current_node: int
    path: tuple[int, ...]

    @property
    def t(self) -> int:
        return len(self.path) - 1

    @classmethod
    def start(cls, node: int) -> "AgentState":
        return cls(node, (node,))

    def move(self, node: int) -> "AgentState":
        return AgentState(node, self.path + (node,))


@dataclass(frozen=True)
class NavGraph:
    """The explored graph G_t: a world plus per-node observation flags."""

    world: World
    flags: np.ndarray

    @classmethod
    def empty(cls, world: World) -> "NavGraph":
        return cls(world, np.zeros(world.n_nodes, dtype=np.int8))

    @property
    def explored(self) -> np.ndarray:
        return np.flatnonzero(self.flags != UNOBSERVED)

    @property
    def visited(self) -> np.ndarray:
        return np.flatnonzero(self.flags == VISITED)

    @property
    def navigable(self) -> np.ndarray:
        return np.flatnonzero(self.flags == NAVIGABLE)

    def flag(self, u: int) -> str:
        self.world._check(u)
        return FLAG_NAMES[int(self.flags[u])]

    def candidates(self, current: int) -> list[int]:
        """Navigable (observed, unvisited) neighbours of ``current``, sorted by id."""
        return [v for v in self.world.neighbors(current) if self.flags[v] == NAVIGABLE]


def observe_and_expand(graph: NavGraph, state: AgentState) -> NavGraph:
    """Mark the current node visited and its unobserved neighbours navigable."""
    u = state.current_node
    graph.world._check(u)
    flags = graph.flags.copy()
    flags[u] = VISITED
    for v in graph.world.adj[u]:
        if flags[v] == UNOBSERVED:
            flags[v] = NAVIGABLE
    return NavGraph(graph.world, flags)


def initial_graph(world: World, start: int) -> NavGraph:
    return observe_and_expand(NavGraph.empty(world), AgentState.start(start))


# -- oracle -----------------------------------------------------------------

def _on_shortest(dist, u, v, w):
    return math.isclose(dist[v] + w, dist[u], rel_tol=1e-12, abs_tol=1e-9)


def shortest_path(world: World, source: int, target: int) -> list[int]:
    """Minimum-length path; ties resolved by taking the smallest next-node id."""
    world._check(source)
    dist = world.distances_to(target)
    if not np.isfinite(dist[source]):
        raise NoPathError(f"no path from {source} to {target}")
    path = [source]
    u = source
    while u != target:
        u = min(v for v, w in world.adj[u].items() if _on_shortest(dist, u, v, w))
        path.append(u)
    return path


def path_length(world: World, path) -> float:
    return float(sum(world.adj[a][b] for a, b in zip(path, path[1:])))


def oracle_next_move(world: World, current: int, goal: int) -> int:
    """Second node of the shortest path to ``goal``; ``current`` itself means stop."""
    if current == goal:
        world._check(current)
        return current
    return shortest_path(world, current, goal)[1]
