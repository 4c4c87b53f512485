import itertools

import numpy as np
import pytest

from hybridec.errors import (
    ArityError,
    ConstructionError,
    CycleError,
    GraphError,
    InvalidAdjustmentSetError,
    SplitStateError,
    UnknownNodeError,
)
from hybridec.graph import (
    SelectionSwig,
    d_separated,
    minimal_adjustment_sets,
    node_split,
    parse_graph,
    verify_adjustment,
)

from conftest import FIG2A, FIG2B, FIG2D


# --- Independent oracle: enumerate every simple path and apply the
# --- blocking rules directly. Written from scratch on raw edge lists.

def oracle_ancestors(edges, nodes, targets):
    parents = {n: set() for n in nodes}
    for u, v in edges:
        parents[v].add(u)
    seen = set(targets)
    frontier = list(targets)
    while frontier:
        node = frontier.pop()
        for p in parents[node]:
            if p not in seen:
                seen.add(p)
                frontier.append(p)
    return seen


def oracle_path_open(path, edges, given, anc_given):
    edge_set = set(edges)
    for i in range(1, len(path) - 1):
        prev_node, mid, nxt = path[i - 1], path[i], path[i + 1]
        is_collider = (prev_node, mid) in edge_set and (nxt, mid) in edge_set
        if is_collider:
            if mid not in anc_given:
                return False
        elif mid in given:
            return False
    return True


def oracle_d_separated(nodes, edges, set_a, set_b, given):
    neighbors = {n: set() for n in nodes}
    for u, v in edges:
        neighbors[u].add(v)
        neighbors[v].add(u)
    anc_given = oracle_ancestors(edges, nodes, given) if given else set()

    def all_simple_paths(start, goal):
        stack = [[start]]
        while stack:
            path = stack.pop()
            for nxt in neighbors[path[-1]]:
                if nxt in path:
                    continue
                if nxt == goal:
                    yield path + [nxt]
                else:
                    stack.append(path + [nxt])

    for a in set_a:
        for b in set_b:
            for path in all_simple_paths(a, b):
                if oracle_path_open(path, edges, given, anc_given):
                    return False
    return True


def plain_swig(n_nodes, edges):
    names = [f"n{i}" for i in range(n_nodes)]
    nodes = tuple((name, "covariate") for name in names)
    return SelectionSwig(nodes=nodes, edges=tuple(edges)), names


def all_dags(n_nodes):
    """Every labeled DAG on n nodes, via acyclic orientations of edge subsets."""
    names = list(range(n_nodes))
    possible = [(i, j) for i in names for j in names if i != j]
    for bits in itertools.product([0, 1], repeat=len(possible)):
        edges = [e for e, b in zip(possible, bits) if b]
        # acyclicity check by Kahn's algorithm
        indeg = {n: 0 for n in names}
        for _, v in edges:
            indeg[v] += 1
        queue = [n for n in names if indeg[n] == 0]
        seen = 0
        indeg_work = dict(indeg)
        while queue:
            node = queue.pop()
            seen += 1
            for u, v in edges:
                if u == node:
                    indeg_work[v] -= 1
                    if indeg_work[v] == 0:
                        queue.append(v)
        if seen == n_nodes:
            yield edges


class TestEngineAgainstOracle:
    def check_graph(self, n_nodes, edges):
        g, names = plain_swig(n_nodes, [(f"n{u}", f"n{v}") for u, v in edges])
        raw_edges = [(f"n{u}", f"n{v}") for u, v in edges]
        for a_idx, b_idx in itertools.combinations(range(n_nodes), 2):
            rest = [i for i in range(n_nodes) if i not in (a_idx, b_idx)]
            for r in range(len(rest) + 1):
                for given_idx in itertools.combinations(rest, r):
                    set_a = {f"n{a_idx}"}
                    set_b = {f"n{b_idx}"}
                    given = {f"n{i}" for i in given_idx}
                    verdict, witness = d_separated(g, set_a, set_b, given)
                    expected = oracle_d_separated(names, raw_edges, set_a, set_b, given)
                    assert verdict == expected, (edges, set_a, set_b, given)
                    if not verdict:
                        anc = oracle_ancestors(raw_edges, names, given) if given else set()
                        assert witness[0] in set_a and witness[-1] in set_b
                        assert len(set(witness)) == len(witness)
                        assert oracle_path_open(list(witness), raw_edges, given, anc)

    def test_exhaustive_three_node_dags(self):
        for edges in all_dags(3):
            self.check_graph(3, edges)

    def test_exhaustive_four_node_dags(self):
        count = 0
        for edges in all_dags(4):
            self.check_graph(4, edges)
            count += 1
        assert count == 543  # number of labeled DAGs on 4 nodes

    @pytest.mark.slow
    def test_random_five_and_six_node_dags(self):
        rng = np.random.default_rng(2024)
        for n_nodes in (5, 6):
            for _ in range(120):
                order = rng.permutation(n_nodes)
                edges = []
                for i in range(n_nodes):
                    for j in range(i + 1, n_nodes):
                        if rng.random() < 0.35:
                            edges.append((int(order[i]), int(order[j])))
                self.check_graph(n_nodes, edges)


class TestCanonicalQueries:
    def test_chain(self):
        g, _ = plain_swig(3, [("n0", "n1"), ("n1", "n2")])
        assert d_separated(g, {"n0"}, {"n2"}, {"n1"}) == (True, None)
        separated, witness = d_separated(g, {"n0"}, {"n2"}, set())
        assert not separated and witness == ("n0", "n1", "n2")

    def test_collider(self):
        g, _ = plain_swig(3, [("n0", "n2"), ("n1", "n2")])
        assert d_separated(g, {"n0"}, {"n1"}, set()) == (True, None)
        separated, _ = d_separated(g, {"n0"}, {"n1"}, {"n2"})
        assert not separated

    def test_collider_descendant_opens(self):
        g, _ = plain_swig(4, [("n0", "n2"), ("n1", "n2"), ("n2", "n3")])
        assert d_separated(g, {"n0"}, {"n1"}, {"n3"})[0] is False

    def test_disjointness_required(self):
        g, _ = plain_swig(3, [("n0", "n1")])
        with pytest.raises(GraphError):
            d_separated(g, {"n0"}, {"n0"}, set())

    def test_unknown_node(self):
        g, _ = plain_swig(2, [("n0", "n1")])
        with pytest.raises(UnknownNodeError):
            d_separated(g, {"n0"}, {"zzz"}, set())

    def test_empty_sets_vacuously_separated(self):
        g, _ = plain_swig(2, [("n0", "n1")])
        assert d_separated(g, {"n0"}, set(), set()) == (True, None)


class TestParseGraph:
    def test_figure_graph_parses(self):
        g = parse_graph(FIG2A)
        assert len(g.nodes) == 5
        assert g.treatment == "A"
        assert g.outcome == "Y"
        assert g.selection_nodes == ("S",)

    def test_cycle_reported(self):
        with pytest.raises(CycleError) as err:
            parse_graph(
                {
                    "nodes": [
                        {"name": "Y", "kind": "outcome"},
                        {"name": "W1", "kind": "covariate"},
                        {"name": "A", "kind": "treatment"},
                    ],
                    "edges": [["Y", "W1"], ["W1", "Y"], ["A", "Y"]],
                }
            )
        assert set(err.value.cycle) >= {"Y", "W1"}

    def test_selection_node_with_parent_rejected(self):
        with pytest.raises(ConstructionError):
            parse_graph(
                {
                    "nodes": [
                        {"name": "S", "kind": "selection"},
                        {"name": "W", "kind": "covariate"},
                        {"name": "A", "kind": "treatment"},
                        {"name": "Y", "kind": "outcome"},
                    ],
                    "edges": [["W", "S"], ["S", "Y"], ["A", "Y"]],
                }
            )

    def test_selection_into_treatment_rejected(self):
        with pytest.raises(ConstructionError):
            parse_graph(
                {
                    "nodes": [
                        {"name": "S", "kind": "selection"},
                        {"name": "A", "kind": "treatment"},
                        {"name": "Y", "kind": "outcome"},
                    ],
                    "edges": [["S", "A"], ["A", "Y"]],
                }
            )

    def test_multiple_selection_nodes_allowed(self):
        g = parse_graph(
            {
                "nodes": [
                    {"name": "S1", "kind": "selection"},
                    {"name": "S2", "kind": "selection"},
                    {"name": "W1", "kind": "covariate"},
                    {"name": "W2", "kind": "covariate"},
                    {"name": "A", "kind": "treatment"},
                    {"name": "Y", "kind": "outcome"},
                ],
                "edges": [["S1", "W1"], ["S2", "W2"], ["W1", "Y"], ["W2", "Y"], ["A", "Y"]],
            }
        )
        assert g.selection_nodes == ("S1", "S2")

    def test_arity_errors(self):
        with pytest.raises(ArityError):
            parse_graph({"nodes": [{"name": "Y", "kind": "outcome"}], "edges": []})
        with pytest.raises(ArityError):
            parse_graph(
                {
                    "nodes": [
                        {"name": "A", "kind": "treatment"},
                        {"name": "B", "kind": "treatment"},
                        {"name": "Y", "kind": "outcome"},
                    ],
                    "edges": [],
                }
            )


class TestNodeSplit:
    def test_split_moves_children_keeps_parents(self):
        g = parse_graph(
            {
                "nodes": [
                    {"name": "W", "kind": "covariate"},
                    {"name": "A", "kind": "treatment"},
                    {"name": "Y", "kind": "outcome"},
                ],
                "edges": [["W", "A"], ["A", "Y"]],
            }
        )
        swig = node_split(g)
        assert ("W", "A") in swig.edges
        assert ("A", "Y") not in swig.edges
        assert ("A=0", "Y") in swig.edges
        assert swig.kind_of["A=0"] == "intervention"
        assert swig.split_applied

    def test_double_split_errors(self):
        swig = node_split(parse_graph(FIG2A))
        with pytest.raises(SplitStateError):
            node_split(swig)

    def test_childless_treatment_gives_isolated_intervention(self):
        g = parse_graph(
            {
                "nodes": [
                    {"name": "A", "kind": "treatment"},
                    {"name": "W", "kind": "covariate"},
                    {"name": "Y", "kind": "outcome"},
                ],
                "edges": [["W", "Y"], ["W", "A"]],
            }
        )
        swig = node_split(g)
        assert swig.children()["A=0"] == []
        assert swig.parents()["A=0"] == []

    def test_split_keeps_selection_edges(self):
        swig = node_split(parse_graph(FIG2B))
        assert ("S", "W1") in swig.edges
        assert ("S", "W2") in swig.edges


class TestVerifyAdjustment:
    def test_figure_a_w1_sufficient(self):
        swig = node_split(parse_graph(FIG2A))
        verdict = verify_adjustment(swig, {"W1"})
        assert verdict.sufficient and verdict.witness is None

    def test_figure_b_requires_both(self):
        swig = node_split(parse_graph(FIG2B))
        assert not verify_adjustment(swig, {"W1"}).sufficient
        assert verify_adjustment(swig, {"W1", "W2"}).sufficient

    def test_figure_d_unobserved_blocks_identification(self):
        swig = node_split(parse_graph(FIG2D))
        verdict = verify_adjustment(swig, set())
        assert not verdict.sufficient
        assert verdict.witness == ("S", "W1", "Y")
        with pytest.raises(InvalidAdjustmentSetError):
            verify_adjustment(swig, {"W1"})  # unobserved

    def test_outcome_or_treatment_in_set_rejected(self):
        swig = node_split(parse_graph(FIG2A))
        for bad in ("Y", "A", "S", "A=0"):
            with pytest.raises(InvalidAdjustmentSetError):
                verify_adjustment(swig, {bad})

    def test_requires_split(self):
        g = parse_graph(FIG2A)
        with pytest.raises(SplitStateError):
            verify_adjustment(g, {"W1"})

    def test_no_selection_nodes_any_set_sufficient(self):
        g = parse_graph(
            {
                "nodes": [
                    {"name": "W1", "kind": "covariate"},
                    {"name": "A", "kind": "treatment"},
                    {"name": "Y", "kind": "outcome"},
                ],
                "edges": [["W1", "Y"], ["A", "Y"]],
            }
        )
        swig = node_split(g)
        assert verify_adjustment(swig, set()).sufficient
        assert verify_adjustment(swig, {"W1"}).sufficient


NONMONOTONE = {
    "nodes": [
        {"name": "S", "kind": "selection"},
        {"name": "W", "kind": "covariate"},
        {"name": "C", "kind": "covariate"},
        {"name": "A", "kind": "treatment"},
        {"name": "Y", "kind": "outcome"},
    ],
    "edges": [["S", "W"], ["W", "Y"], ["S", "C"], ["Y", "C"], ["A", "Y"]],
}


class TestMinimalSets:
    def test_figure_a(self):
        swig = node_split(parse_graph(FIG2A))
        assert minimal_adjustment_sets(swig) == [("W1",)]

    def test_figure_b(self):
        swig = node_split(parse_graph(FIG2B))
        assert minimal_adjustment_sets(swig) == [("W1", "W2")]

    def test_figure_d_nothing_suffices(self):
        swig = node_split(parse_graph(FIG2D))
        assert minimal_adjustment_sets(swig) == []

    def test_no_selection_gives_empty_set(self):
        g = parse_graph(
            {
                "nodes": [
                    {"name": "W1", "kind": "covariate"},
                    {"name": "A", "kind": "treatment"},
                    {"name": "Y", "kind": "outcome"},
                ],
                "edges": [["W1", "Y"], ["A", "Y"]],
            }
        )
        assert minimal_adjustment_sets(node_split(g)) == [()]

    def test_sufficiency_not_monotone(self):
        swig = node_split(parse_graph(NONMONOTONE))
        assert verify_adjustment(swig, {"W"}).sufficient
        assert not verify_adjustment(swig, {"W", "C"}).sufficient
        assert minimal_adjustment_sets(swig) == [("W",)]

    def test_sufficient_sets_contain_a_minimal_one(self):
        for doc in (FIG2A, FIG2B, NONMONOTONE):
            swig = node_split(parse_graph(doc))
            minimal = minimal_adjustment_sets(swig)
            observed = swig.observed_covariates
            for r in range(len(observed) + 1):
                for subset in itertools.combinations(sorted(observed), r):
                    if verify_adjustment(swig, subset).sufficient:
                        assert any(set(m) <= set(subset) for m in minimal)

    def test_max_size_truncates(self):
        swig = node_split(parse_graph(FIG2B))
        assert minimal_adjustment_sets(swig, max_size=1) == []
        with pytest.raises(GraphError):
            minimal_adjustment_sets(swig, max_size=5)
