"""Selection diagrams, the treatment node-split, and d-separation queries.

A selection diagram is a causal DAG over covariates, treatment, and
outcome, augmented with root selection nodes that mark where the trial and
external-control populations may differ. After splitting the treatment
node, conditional independence of the outcome from every selection node
given a covariate set certifies that set as sufficient for adjustment.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from itertools import combinations

from .errors import (
    ArityError,
    ConstructionError,
    CycleError,
    GraphError,
    InvalidAdjustmentSetError,
    SplitStateError,
    UnknownNodeError,
)

__all__ = [
    "NODE_KINDS",
    "SelectionSwig",
    "AdjustmentVerdict",
    "parse_graph",
    "node_split",
    "d_separated",
    "verify_adjustment",
    "minimal_adjustment_sets",
]

NODE_KINDS = ("covariate", "treatment", "outcome", "selection", "intervention", "unobserved")

# Kinds a selection node may point into.
_SELECTABLE = {"covariate", "unobserved", "outcome"}


@dataclass(frozen=True)
class SelectionSwig:
    """Immutable diagram: node kinds, directed edges, and the split flag."""

    nodes: tuple[tuple[str, str], ...]  # (name, kind), insertion order
    edges: tuple[tuple[str, str], ...]
    split_applied: bool = False

    @property
    def kind_of(self) -> dict[str, str]:
        return dict(self.nodes)

    def node_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.nodes)

    def parents(self) -> dict[str, list[str]]:
        out = {name: [] for name, _ in self.nodes}
        for u, v in self.edges:
            out[v].append(u)
        return out

    def children(self) -> dict[str, list[str]]:
        out = {name: [] for name, _ in self.nodes}
        for u, v in self.edges:
            out[u].append(v)
        return out

    def of_kind(self, kind: str) -> tuple[str, ...]:
        return tuple(name for name, k in self.nodes if k == kind)

    @property
    def treatment(self) -> str:
        return self.of_kind("treatment")[0]

    @property
    def outcome(self) -> str:
        return self.of_kind("outcome")[0]

    @property
    def selection_nodes(self) -> tuple[str, ...]:
        return self.of_kind("selection")

    @property
    def observed_covariates(self) -> tuple[str, ...]:
        return self.of_kind("covariate")

    def to_json(self) -> dict:
        return {
            "nodes": [{"name": name, "kind": kind} for name, kind in self.nodes],
            "edges": [[u, v] for u, v in self.edges],
            "split_applied": self.split_applied,
        }


def _find_cycle(names, children):
    """Return one directed cycle as a node list, or None."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in names}
    parent = {}
    for root in names:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(children[root]))]
        color[root] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for child in it:
                if color[child] == GRAY:
                    cycle = [child, node]
                    cur = node
                    while cur != child:
                        cur = parent[cur]
                        cycle.append(cur)
                    return cycle[::-1]
                if color[child] == WHITE:
                    color[child] = GRAY
                    parent[child] = node
                    stack.append((child, iter(children[child])))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return None


def _validate(nodes, edges, split_applied):
    kind_of = dict(nodes)
    if len(kind_of) != len(nodes):
        raise ConstructionError("duplicate node names")
    for name, kind in nodes:
        if kind not in NODE_KINDS:
            raise ConstructionError(f"node {name!r} has unknown kind {kind!r}")
    seen = set()
    for u, v in edges:
        if u not in kind_of or v not in kind_of:
            raise UnknownNodeError(f"edge ({u!r}, {v!r}) references an unknown node")
        if u == v:
            raise ConstructionError(f"self-loop on {u!r}")
        if (u, v) in seen:
            raise ConstructionError(f"duplicate edge ({u!r}, {v!r})")
        seen.add((u, v))

    names = [name for name, _ in nodes]
    children = {n: [] for n in names}
    has_parent = set()
    for u, v in edges:
        children[u].append(v)
        has_parent.add(v)

    cycle = _find_cycle(names, children)
    if cycle:
        raise CycleError(cycle)

    for name, kind in nodes:
        if kind == "selection":
            if name in has_parent:
                raise ConstructionError(f"selection node {name!r} must be a root")
            for child in children[name]:
                if kind_of[child] not in _SELECTABLE:
                    raise ConstructionError(
                        f"selection node {name!r} points into {child!r} "
                        f"({kind_of[child]}); only covariates or the outcome are allowed"
                    )
        if kind == "intervention" and not split_applied:
            raise ConstructionError("intervention nodes only exist after the node-split")

    for kind in ("treatment", "outcome"):
        count = sum(1 for _, k in nodes if k == kind)
        if count != 1:
            raise ArityError(f"graph must contain exactly one {kind} node, found {count}")


def parse_graph(document: str | dict) -> SelectionSwig:
    """Build a validated, unsplit diagram from a JSON document.

    Expected shape: ``{"nodes": [{"name": ..., "kind": ...}, ...],
    "edges": [[parent, child], ...]}``.
    """
    doc = json.loads(document) if isinstance(document, str) else document
    try:
        nodes = tuple((entry["name"], entry["kind"]) for entry in doc["nodes"])
        edges = tuple((u, v) for u, v in doc["edges"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed graph document: {exc}") from exc
    _validate(nodes, edges, split_applied=False)
    return SelectionSwig(nodes=nodes, edges=edges, split_applied=False)


def node_split(g: SelectionSwig) -> SelectionSwig:
    """Split the treatment node: incoming edges stay on it, outgoing edges
    move to a new intervention node fixed at control, and the outcome is
    read as the untreated potential outcome from here on."""
    if g.split_applied:
        raise SplitStateError("node-split already applied")
    treatment = g.treatment
    intervention = f"{treatment}=0"
    if intervention in g.kind_of:
        raise ConstructionError(f"node name {intervention!r} already taken")
    nodes = g.nodes + ((intervention, "intervention"),)
    edges = tuple(
        (intervention, v) if u == treatment else (u, v) for u, v in g.edges
    )
    _validate(nodes, edges, split_applied=True)
    return SelectionSwig(nodes=nodes, edges=edges, split_applied=True)


def _check_nodes_exist(g: SelectionSwig, names) -> None:
    known = g.kind_of
    for name in names:
        if name not in known:
            raise UnknownNodeError(f"unknown node {name!r}")


def _ancestors(parents: dict[str, list[str]], seeds) -> set[str]:
    seen = set(seeds)
    queue = deque(seeds)
    while queue:
        node = queue.popleft()
        for p in parents[node]:
            if p not in seen:
                seen.add(p)
                queue.append(p)
    return seen


def _bayes_ball_connected(g: SelectionSwig, set_a, set_b, given) -> bool:
    """Linear-time reachability over (node, travel-direction) states."""
    parents = g.parents()
    children = g.children()
    anc = _ancestors(parents, given) if given else set()
    targets = set(set_b)

    visited = set()
    queue = deque()
    for s in set_a:
        for c in children[s]:
            queue.append((c, "down"))
        for p in parents[s]:
            queue.append((p, "up"))

    while queue:
        node, direction = queue.popleft()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node in targets:
            return True
        if direction == "down":
            # Arrived along an arrow into `node`.
            if node in anc:  # collider continuation (ancestor of, or in, the given set)
                for p in parents[node]:
                    queue.append((p, "up"))
            if node not in given:  # chain continuation
                for c in children[node]:
                    queue.append((c, "down"))
        else:
            # Arrived against an arrow (from a child of `node`).
            if node not in given:
                for c in children[node]:
                    queue.append((c, "down"))
                for p in parents[node]:
                    queue.append((p, "up"))
    return False


def _find_open_path(g: SelectionSwig, set_a, set_b, given):
    """Depth-first search for a concrete open simple path; used only to
    produce a witness once reachability says the sets are connected."""
    edge_set = set(g.edges)
    parents = g.parents()
    children = g.children()
    anc = _ancestors(parents, given) if given else set()
    targets = set(set_b)

    def neighbors(u):
        return children[u] + parents[u]

    def step_open(prev, mid, nxt):
        collider = (prev, mid) in edge_set and (nxt, mid) in edge_set
        if collider:
            return mid in anc
        return mid not in given

    def dfs(path):
        u = path[-1]
        for v in neighbors(u):
            if v in path:
                continue
            if len(path) >= 2 and not step_open(path[-2], path[-1], v):
                continue
            if v in targets:
                return path + [v]
            found = dfs(path + [v])
            if found:
                return found
        return None

    for a in sorted(set_a):
        found = dfs([a])
        if found:
            return tuple(found)
    return None


def d_separated(g: SelectionSwig, set_a, set_b, given=()):
    """Decide ``set_a independent of set_b given `given``` in the diagram.

    Returns ``(True, None)`` when every path is blocked, otherwise
    ``(False, witness)`` with one open path as a node sequence. Empty
    query sets are vacuously separated.
    """
    set_a, set_b, given = set(set_a), set(set_b), set(given)
    _check_nodes_exist(g, set_a | set_b | given)
    if set_a & set_b or set_a & given or set_b & given:
        raise GraphError("query sets must be disjoint")
    if not set_a or not set_b:
        return True, None
    if not _bayes_ball_connected(g, set_a, set_b, given):
        return True, None
    witness = _find_open_path(g, set_a, set_b, given)
    if witness is None:  # reachability and path search must agree
        raise GraphError("internal inconsistency between reachability and path search")
    return False, witness


@dataclass(frozen=True)
class AdjustmentVerdict:
    x_set: tuple[str, ...]
    sufficient: bool
    witness: tuple[str, ...] | None = None

    def to_json(self) -> dict:
        doc = {"x_set": list(self.x_set), "sufficient": self.sufficient}
        if self.witness is not None:
            doc["witness"] = list(self.witness)
        return doc


def verify_adjustment(g: SelectionSwig, x_set) -> AdjustmentVerdict:
    """Theorem-style sufficiency check: after the split, is the outcome
    independent of every selection node given ``x_set``?"""
    if not g.split_applied:
        raise SplitStateError("apply node_split before checking adjustment sets")
    x_set = tuple(sorted(set(x_set)))
    _check_nodes_exist(g, x_set)
    kind_of = g.kind_of
    for name in x_set:
        kind = kind_of[name]
        if kind in ("treatment", "outcome", "intervention", "selection"):
            raise InvalidAdjustmentSetError(f"{name!r} ({kind}) cannot be adjusted for")
        if kind == "unobserved":
            raise InvalidAdjustmentSetError(f"{name!r} is unobserved and cannot be adjusted for")
    # Query from the selection side so a witness reads selection -> outcome.
    separated, witness = d_separated(g, set(g.selection_nodes), {g.outcome}, set(x_set))
    return AdjustmentVerdict(x_set=x_set, sufficient=separated, witness=witness)


def minimal_adjustment_sets(g: SelectionSwig, max_size: int | None = None):
    """All inclusion-minimal sufficient covariate sets up to ``max_size``,
    by exhaustive search, in lexicographic order."""
    if not g.split_applied:
        raise SplitStateError("apply node_split before searching adjustment sets")
    observed = tuple(sorted(g.observed_covariates))
    if max_size is None:
        max_size = len(observed)
    if max_size > len(observed):
        raise GraphError(f"max_size {max_size} exceeds observed covariates ({len(observed)})")

    sufficient: list[tuple[str, ...]] = []
    for size in range(0, max_size + 1):
        for subset in combinations(observed, size):
            if verify_adjustment(g, subset).sufficient:
                sufficient.append(subset)
    minimal = [
        s
        for s in sufficient
        if not any(set(t) < set(s) for t in sufficient if t != s)
    ]
    return sorted(minimal)
