"""Toy knowledge graph, TransE embedding, one GAT layer and entity-to-row mapping."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autograd as ag
from .kernels import transe_epochs


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    """Triples as an ``(N_G, 3)`` int array plus an undirected neighbor list."""

    triples: np.ndarray
    n_entities: int
    n_relations: int
    adjacency: List[List[int]] = field(default_factory=list)

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        t = self.triples
        if len(t):
            if t[:, [0, 2]].min() < 0 or t[:, [0, 2]].max() >= self.n_entities:
                raise ValueError("entity id out of range")
            if t[:, 1].min() < 0 or t[:, 1].max() >= self.n_relations:
                raise ValueError("relation id out of range")
            if np.any(t[:, 0] == t[:, 2]):
                raise ValueError("head and tail must differ")
            if len({tuple(row) for row in t.tolist()}) != len(t):
                raise ValueError("duplicate triples")
        neigh = [set() for _ in range(self.n_entities)]
        for h, _, tl in t.tolist():
            neigh[h].add(tl)
            neigh[tl].add(h)
        self.adjacency = [sorted(s) for s in neigh]

    def __len__(self) -> int:
        return len(self.triples)

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency])

    def degree_order(self) -> np.ndarray:
        """Entity ids sorted by descending degree, ties by id."""
        deg = self.degrees()
        return np.lexsort((np.arange(self.n_entities), -deg))

    def is_connected(self) -> bool:
        if self.n_entities == 0:
            return True
        seen = {0}
        stack = [0]
        while stack:
            for nb in self.adjacency[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == self.n_entities

    def triple_set(self) -> set:
        return {tuple(row) for row in self.triples.tolist()}

    # line-oriented "head<TAB>relation<TAB>tail" files --------------------
    def save(self, path: Union[str, Path]) -> None:
        lines = [f"# entities={self.n_entities} relations={self.n_relations}"]
        lines += [f"{h}\t{r}\t{t}" for h, r, t in self.triples.tolist()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "KnowledgeGraph":
        n_e = n_r = None
        rows = []
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "entities":
                        n_e = int(val)
                    elif key == "relations":
                        n_r = int(val)
                continue
            if line.strip():
                h, r, t = line.split("\t")
                rows.append((int(h), int(r), int(t)))
        arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
        if n_e is None:
            n_e = int(arr[:, [0, 2]].max()) + 1
        if n_r is None:
            n_r = int(arr[:, 1].max()) + 1
        return cls(arr, n_e, n_r)


def build_toy_graph(class_count: int, relations_per_class: int, seed: int = 0) -> KnowledgeGraph:
    """One disease entity per class, ``relations_per_class`` findings each.

    Entity ``k < K`` is the disease of class ``k``; class ``k``'s findings are
    ``K + k*r + j``.  Relation ``j`` links a disease to its ``j``-th finding and
    relation ``r`` ("associated with") links each disease to a randomly chosen
    finding of the next class, which closes the graph into one component.
    """
    K, r = class_count, relations_per_class
    if K < 2:
        raise ValueError("need at least 2 classes")
    if r < 1:
        raise ValueError("need at least one relation per class")
    rng = np.random.default_rng(seed)
    triples = []
    for k in range(K):
        for j in range(r):
            triples.append((k, j, K + k * r + j))
    for k in range(K):
        nxt = (k + 1) % K
        j = int(rng.integers(r))
        triples.append((k, r, K + nxt * r + j))
    return KnowledgeGraph(np.array(triples), K + K * r, r + 1)


@dataclass
class EntityEmbeddings:
    E: np.ndarray
    R: np.ndarray
    contextual: Optional[np.ndarray] = None
    losses: Optional[np.ndarray] = None


def transe_score(E: np.ndarray, R: np.ndarray, triples: np.ndarray) -> np.ndarray:
    """``||h + r - t||_2`` per triple."""
    triples = np.asarray(triples).reshape(-1, 3)
    diff = E[triples[:, 0]] + R[triples[:, 1]] - E[triples[:, 2]]
    return np.sqrt(np.sum(diff * diff, axis=1))


def margin_ranking_loss(pos_dist, neg_dist, margin: float) -> np.ndarray:
    return np.maximum(0.0, margin + np.asarray(pos_dist) - np.asarray(neg_dist))


def corrupt_triples(graph: KnowledgeGraph, epochs: int, rng: np.random.Generator) -> np.ndarray:
    """``(epochs, N_G, 2)`` corrupted (head, tail) pairs, true triples filtered out."""
    known = graph.triple_set()
    n = len(graph)
    out = np.empty((epochs, n, 2), dtype=np.int64)
    ne = graph.n_entities
    for ep in range(epochs):
        for k, (h, r, t) in enumerate(graph.triples.tolist()):
            for _ in range(1000):
                e = int(rng.integers(ne))
                if rng.random() < 0.5:
                    cand = (e, r, t)
                else:
                    cand = (h, r, e)
                if cand[0] != cand[2] and cand not in known:
                    break
            else:  # pragma: no cover - only on saturated graphs
                raise RuntimeError("could not draw a corrupted triple")
            out[ep, k] = (cand[0], cand[2])
    return out


def transe_train(
    graph: KnowledgeGraph,
    d_e: int,
    margin: float = 1.0,
    epochs: int = 200,
    lr: float = 0.01,
    seed: int = 0,
) -> EntityEmbeddings:
    """TransE by per-triple SGD on the margin ranking loss.

    Entity rows are renormalized to unit length after every epoch; ``losses``
    holds the mean hinge loss per epoch.
    """
    rng = np.random.default_rng(seed)
    bound = 6.0 / np.sqrt(d_e)
    E = rng.uniform(-bound, bound, size=(graph.n_entities, d_e))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    R = rng.uniform(-bound, bound, size=(graph.n_relations, d_e))
    R /= np.linalg.norm(R, axis=1, keepdims=True)
    negatives = corrupt_triples(graph, epochs, rng)
    orders = np.stack([rng.permutation(len(graph)) for _ in range(epochs)]).astype(np.int64)
    losses = transe_epochs(E, R, graph.triples, negatives, orders, margin, lr)
    if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(E)) and np.all(np.isfinite(R))):
        bad = int(np.argmax(~np.isfinite(losses))) if not np.all(np.isfinite(losses)) else -1
        raise FloatingPointError(f"TransE diverged (first non-finite epoch loss at {bad})")
    return EntityEmbeddings(E=E, R=R, losses=losses)


def gat_layer(
    features: np.ndarray,
    graph: KnowledgeGraph,
    W: np.ndarray,
    a: np.ndarray,
    leaky_slope: float = 0.2,
    self_loops: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """Single-head graph attention.

    ``a`` is the ``2*d_out`` attention vector split into source and neighbor
    halves.  Returns ``(contextual, alpha)`` where ``alpha`` is the dense
    ``N_e x N_e`` coefficient matrix (rows sum to 1 over each neighborhood).
    Isolated nodes attend to themselves even with ``self_loops=False``.
    """
    X = np.asarray(features, dtype=np.float64)
    Wh = X @ W
    d_out = Wh.shape[1]
    a = np.asarray(a).reshape(-1)
    if a.shape[0] != 2 * d_out:
        raise ValueError(f"attention vector must have length {2 * d_out}")
    n = graph.n_entities
    mask = np.zeros((n, n), dtype=bool)
    for i, nbrs in enumerate(graph.adjacency):
        mask[i, nbrs] = True
        if self_loops or not nbrs:
            mask[i, i] = True
    raw = (Wh @ a[:d_out])[:, None] + (Wh @ a[d_out:])[None, :]
    scores = np.where(raw > 0, raw, leaky_slope * raw)
    scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(scores), 0.0)
    alpha = e / e.sum(axis=1, keepdims=True)
    return alpha @ Wh, alpha


def init_gat_params(d_e: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    W = np.eye(d_e) + 0.1 * rng.standard_normal((d_e, d_e)) / np.sqrt(d_e)
    a = rng.standard_normal(2 * d_e) / np.sqrt(d_e)
    return W, a


def build_knowledge(
    class_count: int,
    relations_per_class: int,
    d_e: int,
    seed: int = 0,
    margin: float = 1.0,
    epochs: int = 200,
    lr: float = 0.01,
    leaky_slope: float = 0.2,
) -> Tuple[KnowledgeGraph, EntityEmbeddings]:
    """Graph -> TransE -> GAT, all deterministic in ``seed``."""
    graph = build_toy_graph(class_count, relations_per_class, seed)
    emb = transe_train(graph, d_e, margin=margin, epochs=epochs, lr=lr, seed=seed)
    W, a = init_gat_params(d_e, np.random.default_rng(seed + 1))
    emb.contextual, _ = gat_layer(emb.E, graph, W, a, leaky_slope)
    return graph, emb


def entity_rows(order: Sequence[int], target_rows: int) -> np.ndarray:
    """Row selection for :func:`map_entities`: first ``target_rows`` of ``order``, cyclic."""
    order = np.asarray(order)
    return order[np.arange(target_rows) % len(order)]


def map_entities(contextual, target_rows: int, W_map, order: Optional[Sequence[int]] = None) -> ag.Var:
    """Project knowledge vectors ``d_e -> d`` and lay them out as ``target_rows`` rows.

    ``order`` ranks entities (typically by degree); the top ``target_rows`` are
    kept and the list is tiled cyclically when there are fewer entities.
    """
    c = ag._wrap(contextual)
    if order is None:
        order = np.arange(c.shape[0])
    proj = c @ ag._wrap(W_map)
    return proj[entity_rows(order, target_rows)]
