"""Worker grid geometry, routing and soft-lock arbitration"""
import json

import numpy as np
import pytest

from src.csc_solver import CandidateUpdate, apply_update, cost_delta, init_state
from src.exceptions import GridError
from src.grid_protocol import (
    acceptance_bound, acceptance_bound_from_counts, border_geometry, dump_grid, grid_from_counts,
    half_acceptance_counts, interference_delta, make_grid, max_feasible_workers,
    notify_set, snake_order, soft_lock_check, token_path,
)
from src.tensor_core import ActivationMap, Dictionary, Domain, SubDomain, objective


class TestMakeGrid:

    def test_square_grids(self):
        domain = Domain((512, 512))
        assert make_grid(domain, 4, (16, 16)).counts == (2, 2)
        assert make_grid(domain, 49, (16, 16)).counts == (7, 7)

    def test_line_split(self):
        grid = make_grid(Domain((128, 128)), 8, (8, 8), split='1d')
        assert grid.counts == (8, 1)
        assert grid.sub_domain(3) == SubDomain((48, 0), (64, 128))

    def test_infeasible_reports_max(self):
        domain = Domain((128, 128))
        assert max_feasible_workers(domain, (8, 8), '1d') == 8
        assert max_feasible_workers(domain, (8, 8)) == 64
        with pytest.raises(GridError) as excinfo:
            make_grid(domain, 9, (8, 8), split='1d')
        assert excinfo.value.max_feasible == 8
        with pytest.raises(GridError):
            make_grid(domain, 0, (8, 8))

    def test_sub_domains_partition_the_domain(self):
        domain = Domain((50, 37))
        grid = make_grid(domain, 6, (4, 3))
        owners = np.full(domain.sizes, -1)
        for w in range(grid.n_workers):
            sub = grid.sub_domain(w)
            assert np.all(owners[sub.slices()] == -1)
            owners[sub.slices()] = w
            assert all(e >= 2 * l for e, l in zip(sub.shape, grid.support))
        assert np.all(owners >= 0)
        for pos in [(0, 0), (49, 36), (17, 20)]:
            assert owners[pos] == grid.owner(pos)

    def test_owner_outside_domain(self):
        grid = make_grid(Domain((40,)), 2, (5,))
        with pytest.raises(GridError):
            grid.owner((40,))

    def test_neighbors(self):
        grid = make_grid(Domain((90, 90)), 9, (5, 5))
        assert grid.neighbors(4) == [0, 1, 2, 3, 5, 6, 7, 8]
        assert grid.neighbors(0) == [1, 3, 4]
        assert grid.coords(5) == (1, 2)
        assert grid.index((2, 1)) == 7

    def test_counts_give_the_same_cuts(self):
        domain = Domain((128, 100))
        assert grid_from_counts(domain, (7, 5), (8, 8)) == make_grid(domain, 35, (8, 8))
        assert grid_from_counts(domain, (7, 5), (8, 8)).cuts[0] == (0, 19, 38, 56, 74, 92, 110, 128)

    def test_counts_skip_the_edge_check(self):
        grid = grid_from_counts(Domain((10,)), (3,), (3,))
        assert grid.cuts == ((0, 4, 7, 10),)
        with pytest.raises(GridError):
            make_grid(Domain((10,)), 3, (3,))
        with pytest.raises(GridError):
            grid_from_counts(Domain((10,)), (3, 1), (3,))


def test_border_and_extension_in_1d():
    geom = border_geometry(SubDomain((100,), (200,)), (10,), Domain((300,)))
    assert geom.border == [SubDomain((100,), (110,)), SubDomain((190,), (200,))]
    assert geom.extension == [SubDomain((90,), (100,)), SubDomain((200,), (210,))]
    assert geom.in_border((105,)) and not geom.in_border((150,))
    assert geom.in_extended_border((115,)) and not geom.in_extended_border((125,))
    assert geom.in_extension((95,)) and not geom.in_extension((89,))
    assert not geom.in_extension((150,))


def test_border_clipped_at_domain_edge():
    geom = border_geometry(SubDomain((0, 0), (30, 30)), (5, 5), Domain((60, 60)))
    assert geom.halo == SubDomain((0, 0), (35, 35))
    # the extension is an L-shaped rim
    assert sum(box.size for box in geom.extension) == 35 * 35 - 30 * 30
    assert sum(box.size for box in geom.border) == 30 * 30 - 20 * 20


class TestNotifySet:

    @pytest.fixture
    def grid(self):
        return make_grid(Domain((90, 90)), 9, (5, 5))

    def test_interior_update(self, grid):
        assert notify_set((45, 45), grid) == set()

    def test_face_update(self, grid):
        assert notify_set((31, 45), grid) == {1}

    def test_corner_update(self, grid):
        assert notify_set((31, 31), grid) == {0, 1, 3}

    def test_targets_are_neighbors(self, grid):
        for pos in [(29, 29), (59, 30), (30, 88)]:
            origin = grid.owner(pos)
            assert notify_set(pos, grid) <= set(grid.neighbors(origin))


class TestSoftLock:

    def test_larger_competitor_rejects(self):
        assert not soft_lock_check(0.5, [(0.7, 2)], worker=1)

    def test_tie_with_lower_index_rejects(self):
        assert not soft_lock_check(0.5, [(0.5, 0)], worker=1)

    def test_tie_with_higher_index_accepts(self):
        assert soft_lock_check(0.5, [(0.5, 3)], worker=1)

    def test_smaller_competitors_accept(self):
        assert soft_lock_check(0.5, [(0.1, 0), (0.49, 2)], worker=1)

    def test_interior_skips_the_check(self):
        assert soft_lock_check(0.5, [(9.0, 0)], worker=1, in_border=False)

    def test_symmetric_ties_accept_exactly_one(self):
        # two workers looking at each other's candidate with equal magnitude
        assert soft_lock_check(1.0, [(1.0, 4)], worker=3) != soft_lock_check(1.0, [(1.0, 3)], worker=4)


class TestInterference:

    def test_adjacent_dirac_pair(self):
        D = Dictionary(np.array([1.0, 1.0]).reshape(1, 2, 1))
        assert interference_delta([(0, (5,), 1.0), (0, (6,), 1.0)], D) == pytest.approx(1.0)

    def test_far_updates_do_not_interfere(self, instance_2d):
        _, D = instance_2d
        updates = [(0, (1, 1), 1.0), (1, (1, 5), -2.0), (0, (9, 9), 0.5)]
        assert interference_delta(updates, D) == 0.0

    def test_joint_decrease(self, instance_2d, rng):
        X, D = instance_2d
        lmbd = 0.3
        z_hat, beta = init_state(X, D, ActivationMap(0.1 * rng.randn(D.n_atoms, 16, 16)))
        updates = [CandidateUpdate(0, (5, 5), float(z_hat.values[0, 5, 5]), 1.0),
                   CandidateUpdate(1, (6, 4), float(z_hat.values[1, 6, 4]), -0.7),
                   CandidateUpdate(0, (4, 6), float(z_hat.values[0, 4, 6]), 0.4)]
        before = objective(X, z_hat, D, lmbd)
        singles = sum(cost_delta(u, z_hat, beta, D, lmbd) for u in updates)
        cross = interference_delta([(u.k, u.position, u.dz) for u in updates], D)
        for u in updates:
            apply_update(z_hat, beta, u, D)
        direct = before - objective(X, z_hat, D, lmbd)
        assert singles - cross == pytest.approx(direct, rel=1e-10, abs=1e-10)


class TestAcceptanceBound:

    def test_known_grids(self):
        domain = Domain((512, 512))
        assert acceptance_bound(make_grid(domain, 4, (16, 16))) == pytest.approx(0.87890625)
        assert acceptance_bound(make_grid(domain, 16, (16, 16))) == pytest.approx(0.765625)

    def test_single_worker(self):
        assert acceptance_bound(make_grid(Domain((64,)), 1, (8,))) == pytest.approx(1 - 8 / 64)

    def test_clamped_to_zero(self):
        assert acceptance_bound_from_counts((10,), (2,), (8,)) == 0.0

    @pytest.mark.parametrize("sizes, support", [((1000,), (10,)), ((512, 256), (16, 8))])
    def test_half_acceptance_counts(self, sizes, support):
        counts = half_acceptance_counts(sizes, support)
        assert acceptance_bound_from_counts(sizes, counts, support) == pytest.approx(0.5)


def test_snake_order_is_a_path():
    path = snake_order((2, 3))
    assert path == [(0, 0), (0, 1), (0, 2), (1, 2), (1, 1), (1, 0)]
    path = snake_order((3, 2, 2))
    assert len(set(path)) == 12
    for a, b in zip(path, path[1:]):
        assert sum(abs(i - j) for i, j in zip(a, b)) == 1


def test_token_path_visits_every_worker():
    grid = make_grid(Domain((90, 90)), 9, (5, 5))
    path = token_path(grid)
    assert sorted(path) == list(range(9))
    for a, b in zip(path, path[1:]):
        assert b in grid.neighbors(a)


def test_dump_grid(tmp_path):
    grid = make_grid(Domain((64, 64)), 4, (8, 8))
    path = tmp_path / 'grid.json'
    layout = dump_grid(grid, path)
    with open(path, 'r', encoding='utf-8') as f:
        saved = json.load(f)
    assert saved == layout
    assert saved['counts'] == [2, 2]
    assert len(saved['workers']) == 4
    assert saved['workers'][0]['neighbors'] == [1, 2, 3]
