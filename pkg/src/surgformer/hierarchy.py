"""Fixed multiresolution hierarchy: FPS seeds, graph ownership, contraction, pooling."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .mesh import EdgeList, TetMesh, build_edges

__all__ = [
    "Level",
    "MeshHierarchy",
    "farthest_point_sampling",
    "ownership_map",
    "clusters_from_ownership",
    "contract_edges",
    "build_hierarchy",
    "pool_max",
    "unpool_broadcast",
]


def farthest_point_sampling(positions, k: int, rng_seed: int = 0, first: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the smallest index."""
    p = np.asarray(positions, dtype=np.float64)
    n = p.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if first is None:
        first = int(np.random.default_rng(rng_seed).integers(n))
    seeds = np.empty(k, dtype=np.int64)
    seeds[0] = first
    d = _sq_dist(p, p[first])
    for t in range(1, k):
        s = int(np.argmax(d))
        seeds[t] = s
        np.minimum(d, _sq_dist(p, p[s]), out=d)
    return seeds


def _sq_dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # fixed summation order so lattice ties stay exact
    r = p - q
    return r[..., 0] * r[..., 0] + r[..., 1] * r[..., 1] + r[..., 2] * r[..., 2]


def ownership_map(edges: EdgeList, seeds, positions) -> np.ndarray:
    """Assign each node to the seed with fewest hops.

    Ties: smaller Euclidean distance to the seed, then smaller seed node index.
    Nodes no seed can reach take the Euclidean-nearest seed. Returns, per
    node, the position of its owner in ``seeds``.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    if seeds.size == 0:
        raise ValueError("need at least one seed")
    p = np.asarray(positions, dtype=np.float64)
    hops = shortest_path(edges.adjacency(), unweighted=True, directed=False, indices=seeds)
    eucl = _sq_dist(p[None, :, :], p[seeds][:, None, :])
    unreachable = ~np.isfinite(hops).any(axis=0)
    hops[:, unreachable] = 0.0  # fall back to Euclidean order alone
    tie = np.broadcast_to(seeds[:, None], hops.shape)
    # lexsort: last key is primary
    return np.lexsort((tie, eucl, hops), axis=0)[0]


def clusters_from_ownership(owner: np.ndarray, n_coarse: int) -> list[np.ndarray]:
    order = np.argsort(owner, kind="stable")
    counts = np.bincount(owner, minlength=n_coarse)
    return np.split(order, np.cumsum(counts)[:-1])


def contract_edges(fine: EdgeList, owner: np.ndarray, n_coarse: int | None = None) -> EdgeList:
    owner = np.asarray(owner, dtype=np.int64)
    n_coarse = int(owner.max()) + 1 if n_coarse is None else int(n_coarse)
    s, r = fine.senders, fine.receivers
    cs, cr = owner[s], owner[r]
    keep = cs != cr
    loops = np.arange(n_coarse, dtype=np.int64)
    return EdgeList.from_pairs(np.concatenate([cs[keep], loops]), np.concatenate([cr[keep], loops]), n_coarse)


@dataclass(frozen=True)
class Level:
    nodes: np.ndarray  # indices into the finest level
    edges: EdgeList

    @property
    def size(self) -> int:
        return int(self.nodes.size)


class MeshHierarchy:
    """Levels ``0..L`` of nested node sets; frozen once built.

    ``owners[l]`` maps each node of level ``l`` to its local index at level
    ``l + 1``; ``seeds[l]`` lists the level-``l`` local indices chosen as
    level ``l + 1`` nodes, in selection order.
    """

    def __init__(self, levels: list[Level], seeds: list[np.ndarray], owners: list[np.ndarray]):
        if len(seeds) != len(levels) - 1 or len(owners) != len(levels) - 1:
            raise ValueError("need one seed set and ownership map per transition")
        self.levels = levels
        self.seeds = seeds
        self.owners = owners
        self.clusters = [clusters_from_ownership(o, levels[l + 1].size) for l, o in enumerate(owners)]
        # cluster membership sorted by owner, for vectorised pooling
        self._pool_order = [np.argsort(o, kind="stable") for o in owners]
        self._pool_starts = [
            np.concatenate([[0], np.cumsum(np.bincount(o, minlength=levels[l + 1].size))[:-1]])
            for l, o in enumerate(owners)
        ]
        for arr in (*seeds, *owners, *(lv.nodes for lv in levels)):
            arr.setflags(write=False)

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def sizes(self) -> list[int]:
        return [lv.size for lv in self.levels]

    def pool_index(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        """(member order, segment starts) for pooling level ``level`` into ``level + 1``."""
        return self._pool_order[level], self._pool_starts[level]

    def to_dict(self) -> dict:
        return {
            "levels": [
                {
                    "nodes": lv.nodes.tolist(),
                    "indptr": lv.edges.indptr.tolist(),
                    "senders": lv.edges.senders.tolist(),
                }
                for lv in self.levels
            ],
            "seeds": [s.tolist() for s in self.seeds],
            "owners": [o.tolist() for o in self.owners],
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "MeshHierarchy":
        levels = []
        for lv in d["levels"]:
            nodes = np.asarray(lv["nodes"], dtype=np.int64)
            edges = EdgeList(nodes.size, np.asarray(lv["indptr"], dtype=np.int64), np.asarray(lv["senders"], dtype=np.int64))
            levels.append(Level(nodes, edges))
        seeds = [np.asarray(s, dtype=np.int64) for s in d["seeds"]]
        owners = [np.asarray(o, dtype=np.int64) for o in d["owners"]]
        return cls(levels, seeds, owners)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MeshHierarchy":
        return cls.from_dict(json.loads(raw.decode("utf-8")))


def build_hierarchy(mesh: TetMesh, level_ratios=(0.25, 0.25, 0.25), rng_seed: int = 0) -> MeshHierarchy:
    ratios = [float(r) for r in level_ratios]
    if any(not 0.0 < r < 1.0 for r in ratios):
        raise ValueError(f"level ratios must lie in (0, 1), got {ratios}")
    rng = np.random.default_rng(rng_seed)
    nodes = np.arange(mesh.n_nodes, dtype=np.int64)
    levels = [Level(nodes, build_edges(mesh))]
    seeds_all, owners = [], []
    for ratio in ratios:
        fine = levels[-1]
        pos = mesh.vertices[fine.nodes]
        k = max(1, int(round(ratio * fine.size)))
        first = int(rng.integers(fine.size))
        seeds = farthest_point_sampling(pos, k, first=first)
        owner = ownership_map(fine.edges, seeds, pos)
        coarse_edges = contract_edges(fine.edges, owner, k)
        levels.append(Level(fine.nodes[seeds], coarse_edges))
        seeds_all.append(seeds)
        owners.append(owner)
    return MeshHierarchy(levels, seeds_all, owners)


def pool_max(X, clusters) -> np.ndarray:
    """Channelwise max over each cluster; ``X`` is (..., N, D)."""
    X = np.asarray(X)
    out = np.empty(X.shape[:-2] + (len(clusters), X.shape[-1]), dtype=X.dtype)
    for s, members in enumerate(clusters):
        assert len(members) > 0, "empty cluster"
        out[..., s, :] = X[..., members, :].max(axis=-2)
    return out


def unpool_broadcast(Y, owner) -> np.ndarray:
    return np.asarray(Y)[..., np.asarray(owner), :]
