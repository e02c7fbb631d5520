import itertools

import numpy as np
import pytest

from helpers import brute_nearest_labels, open_scene
from symspace.feasibility import FeasibilityParams, build_fields, expected_task_feasibility
from symspace.partition import (
    UNLABELED,
    CandidateLimits,
    adjacency,
    base_voronoi,
    connected_groupings,
    enumerate_candidates,
    format_report,
    location_weights,
    merge,
    rank_and_select,
    score_candidates,
    score_state_space,
)
from symspace.world import GeneratorConfig, generate_scenario

P = FeasibilityParams()
FAST = GeneratorConfig(resolution=0.1)


def brute_adjacency(grid):
    h, w = grid.shape
    edges = set()
    for r, c in itertools.product(range(h), range(w)):
        a = grid[r, c]
        if a == UNLABELED:
            continue
        for dr, dc in itertools.product((-1, 0, 1), repeat=2):
            nr, nc = r + dr, c + dc
            if (dr or dc) and 0 <= nr < h and 0 <= nc < w:
                b = grid[nr, nc]
                if b != UNLABELED and b != a:
                    edges.add((min(a, b), max(a, b)))
    return edges


def all_set_partitions(items):
    if not items:
        yield []
        return
    head, rest = items[0], items[1:]
    for part in all_set_partitions(rest):
        yield [[head]] + part
        for i in range(len(part)):
            yield part[:i] + [[head] + part[i]] + part[i + 1:]


@pytest.mark.parametrize("seed", range(3))
def test_labels_match_brute_force(seed):
    sc = generate_scenario(seed, FAST)
    occ = sc.occupancy()
    base = base_voronoi(sc, occ, P)
    assert np.array_equal(base.sym_grid, brute_nearest_labels(sc, occ, P.reach_max))


def test_tie_goes_to_lowest_index():
    # cell centers on x = 1.375 are exactly equidistant from objects at x = 1.125 and 1.625
    sc = open_scene([(1.125, 1.5), (1.625, 1.5)], [(1.0, 1.4, 1.75, 1.6)], size=(4.0, 3.0),
                    res=0.25, inflation=0.0)
    base = base_voronoi(sc, sc.occupancy(), P)
    col = 5
    labels = base.sym_grid[:, col]
    assert set(labels[labels != UNLABELED].tolist()) == {0}


@pytest.mark.parametrize("seed", range(5))
def test_adjacency_matches_brute_force(seed):
    sc = generate_scenario(seed, FAST)
    base = base_voronoi(sc, sc.occupancy(), P)
    assert adjacency(base) == brute_adjacency(base.sym_grid)


def test_far_objects_not_adjacent():
    sc = open_scene([(0.8, 2.0), (5.8, 2.0)], [(0.6, 1.8, 1.0, 2.2), (5.6, 1.8, 6.0, 2.2)],
                    size=(7.0, 4.0))
    assert adjacency(base_voronoi(sc, sc.occupancy(), P)) == set()


def test_groupings_on_triangle_and_path():
    k3 = {(0, 1), (0, 2), (1, 2)}
    assert len(list(connected_groupings(3, k3, 3))) == 5
    assert len(list(connected_groupings(3, k3, 2))) == 4
    path = {(0, 1), (1, 2)}
    got = list(connected_groupings(3, path, 3))
    assert len(got) == 4
    assert ((0, 2), (1,)) not in got


@pytest.mark.parametrize("n, edges", [
    (4, {(0, 1), (1, 2), (2, 3), (0, 3)}),
    (5, {(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)}),
    (4, set()),
])
def test_groupings_match_exhaustive_partitions(n, edges):
    def connected(g):
        if len(g) == 1:
            return True
        seen, stack = {g[0]}, [g[0]]
        while stack:
            u = stack.pop()
            for v in g:
                if v not in seen and (min(u, v), max(u, v)) in edges:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == len(g)

    expect = set()
    for part in all_set_partitions(list(range(n))):
        groups = tuple(sorted(tuple(sorted(g)) for g in part))
        if all(len(g) <= 3 and connected(g) for g in groups):
            expect.add(groups)
    got = list(connected_groupings(n, edges, 3))
    assert set(got) == expect
    assert got == sorted(got)


def test_grouping_limit_is_a_prefix():
    k4 = {(i, j) for i in range(4) for j in range(i + 1, 4)}
    full = list(connected_groupings(4, k4, 3))
    assert list(connected_groupings(4, k4, 3, limit=5)) == full[:5]


def test_merge_preserves_cells_and_is_disjoint():
    sc = generate_scenario(1, FAST)
    base = base_voronoi(sc, sc.occupancy(), P)
    edges = adjacency(base)
    for ss in enumerate_candidates(base, edges):
        assert np.array_equal(ss.sym_grid != UNLABELED, base.sym_grid != UNLABELED)
        covered = sorted(b for g in ss.merged_from for b in g)
        assert covered == list(range(len(base.locations)))
        for li, g in enumerate(ss.merged_from):
            assert np.array_equal(ss.sym_grid == li, np.isin(base.sym_grid, g))
        assert set(ss.object_assignment) == {o.id for o in sc.objects}


def test_single_merge_candidates():
    sc = generate_scenario(1, FAST)
    base = base_voronoi(sc, sc.occupancy(), P)
    edges = adjacency(base)
    cands = enumerate_candidates(base, edges, CandidateLimits(single_merge=True))
    assert len(cands) == 1 + len(edges)
    assert all(sum(len(g) > 1 for g in c.merged_from) <= 1 for c in cands)


def test_candidate_cap():
    sc = generate_scenario(1, FAST)
    base = base_voronoi(sc, sc.occupancy(), P)
    assert len(enumerate_candidates(base, adjacency(base), CandidateLimits(max_candidates=2))) <= 2


def test_rank_and_select_weights_and_ties():
    cands = ["a", "b", "c"]
    cs = rank_and_select(cands, [1.0, 3.0, 1.0], k=2)
    assert [c for c, _ in cs.ranked] == ["b", "a", "c"]
    assert cs.selection_weights == pytest.approx([0.75, 0.25])
    zero = rank_and_select(cands, [0.0, 0.0, 0.0], k=5)
    assert zero.top_k == 3 and zero.selection_weights == pytest.approx([1 / 3] * 3)
    with pytest.raises(ValueError):
        rank_and_select([], [], 5)


def test_score_all_infeasible_is_zero():
    sc = open_scene([(3.0, 2.0)], [(2.5, 1.5, 3.5, 2.5)])
    occ = sc.occupancy()
    base = base_voronoi(sc, occ, P)
    fields = {k: type(f)(f.object_id, np.zeros_like(f.values), f.resolution)
              for k, f in build_fields(sc, occ).items()}
    assert score_state_space(base, fields, P, np.random.default_rng(0)) == 0.0


def _pair_scene(gap):
    x0 = 3.0 - gap / 2
    return open_scene([(x0, 2.0), (x0 + gap, 2.0)], [(x0 - 0.2, 1.8, x0 + gap + 0.2, 2.2)],
                      size=(7.0, 4.0), inflation=0.1)


def _split_and_merged(sc):
    occ = sc.occupancy()
    base = base_voronoi(sc, occ, P)
    assert adjacency(base) == {(0, 1)}
    return base, merge(base, [(0, 1)]), build_fields(sc, occ)


def _exact_score(ss, fields, weighting):
    total = 0.0
    for o, loc in ss.object_assignment.items():
        li = ss.location_index(loc)
        total += expected_task_feasibility(fields[o].values, ss.sym_grid, li,
                                           location_weights(ss, fields, loc, weighting))
    return total


def test_close_pair_merged_scores_at_least_split():
    base, merged, fields = _split_and_merged(_pair_scene(0.6))
    params = FeasibilityParams(sample_count=20_000)
    rng = np.random.default_rng(0)
    assert score_state_space(merged, fields, params, rng) >= score_state_space(base, fields, params, rng) - 0.02
    assert _exact_score(merged, fields, "joint") >= _exact_score(base, fields, "joint")


def test_joint_weighting_penalizes_pairs_without_shared_standing_poses():
    base, merged, fields = _split_and_merged(_pair_scene(1.8))
    assert _exact_score(merged, fields, "joint") < _exact_score(base, fields, "joint") - 0.5
    # self weighting leaves the merge nearly as attractive as the split
    assert _exact_score(merged, fields, "self") > _exact_score(base, fields, "self") - 0.1


def test_two_objects_at_point_eight_sum():
    base, _, fields = _split_and_merged(_pair_scene(0.6))
    const = {k: type(f)(f.object_id, np.where(f.values > 0, 0.8, 0.0), f.resolution) for k, f in fields.items()}
    assert score_state_space(base, const, P, np.random.default_rng(0)) == pytest.approx(1.6)


def test_scores_are_seed_deterministic_and_reported():
    sc = generate_scenario(4, FAST)
    occ = sc.occupancy()
    base = base_voronoi(sc, occ, P)
    cands = enumerate_candidates(base, adjacency(base))
    fields = build_fields(sc, occ)
    a = score_candidates(cands, fields, P, 3)
    assert a == score_candidates(cands, fields, P, 3)
    report = format_report(rank_and_select(cands, a, 5))
    assert report.splitlines()[0].startswith("rank\tscore")
    assert len(report.splitlines()) == len(cands) + 1
