import numpy as np
import pytest

from subdomain_trisolve.errors import (
    DecompositionViolationError,
    DimensionMismatchError,
    MatrixFormatError,
)
from subdomain_trisolve.parallel import WorkerPool
from subdomain_trisolve.partition import PartitionLabels
from subdomain_trisolve.schedule import (
    LevelMap,
    build_level_schedule,
    level_assign,
    level_assign_fixpoint,
    level_assign_upper,
    scalar_layout,
    schedule_factor,
    strict_triangle,
)
from subdomain_trisolve.sparsemat import BsrMatrix, CsrMatrix


def lower_from_deps(n, deps):
    dense = np.eye(n)
    for row, col in deps:
        dense[row, col] = 0.5
    return CsrMatrix.from_dense(dense)


def test_level_assign_small_chain():
    L = lower_from_deps(4, [(1, 0), (3, 1), (3, 2)])
    levels = level_assign(L)
    np.testing.assert_array_equal(levels.hmap, [0, 1, 0, 2])
    schedule = build_level_schedule(levels)
    assert schedule.level_lists == [[[0, 2], [1], [3]]]
    assert schedule.summary() == {
        "n_subdomains": 1,
        "max_levels": 3,
        "mean_level_width": 4 / 3,
    }


def test_level_assign_dense_upper():
    U = CsrMatrix.from_dense(np.triu(np.ones((4, 4))))
    levels = level_assign_upper(U)
    np.testing.assert_array_equal(levels.hmap, [3, 2, 1, 0])
    assert levels.upper
    schedule = build_level_schedule(levels)
    assert schedule.level_lists == [[[3], [2], [1], [0]]]


def test_diagonal_matrix_is_a_single_level():
    levels = level_assign(CsrMatrix.identity(5))
    np.testing.assert_array_equal(levels.hmap, np.zeros(5))


@pytest.mark.parametrize("upper", [False, True])
def test_levels_respect_dependencies(make_triangle, upper):
    M, layout = make_triangle(60, 11, upper=upper, density=0.3)
    levels = (level_assign_upper if upper else level_assign)(M, layout).hmap
    strict = strict_triangle(M, upper)
    rows, cols = strict.row_of_entry, strict.col_idx
    assert np.all(levels[rows] > levels[cols])
    # each dependent row sits exactly one level above its deepest dependency
    deepest = np.full(M.nrows, -1)
    np.maximum.at(deepest, rows, levels[cols])
    np.testing.assert_array_equal(levels, deepest + 1)


@pytest.mark.parametrize("upper", [False, True])
def test_fixpoint_matches_sweep(make_triangle, upper):
    M, layout = make_triangle(80, 16, upper=upper, density=0.25)
    sweep = (level_assign_upper if upper else level_assign)(M, layout)
    fixpoint = level_assign_fixpoint(M, layout, upper=upper)
    np.testing.assert_array_equal(fixpoint.hmap, sweep.hmap)


def test_fixpoint_sentinel():
    levels = LevelMap(np.zeros(7, dtype=np.int64))
    assert levels.unassigned == 8


def test_pool_does_not_change_levels(make_triangle):
    M, layout = make_triangle(100, 9, density=0.4)
    with WorkerPool(4) as pool:
        parallel = level_assign(M, layout, pool)
    np.testing.assert_array_equal(parallel.hmap, level_assign(M, layout).hmap)


def test_schedule_groups_by_subdomain_then_level(make_triangle):
    M, layout = make_triangle(30, 10, density=0.5)
    schedule = schedule_factor(M, layout)
    levels = level_assign(M, layout).hmap
    assert schedule.n_subdomains == 3
    assert schedule.nrows == 30
    for s, (start, end) in enumerate(layout.ranges()):
        groups = schedule.level_lists[s]
        assert sorted(r for g in groups for r in g) == list(range(start, end))
        assert [levels[g[0]] for g in groups] == sorted({levels[r] for r in range(start, end)})
        for g in groups:
            assert g == sorted(g)
            assert len({levels[r] for r in g}) == 1
    np.testing.assert_array_equal(
        schedule.level_counts(), [len(groups) for groups in schedule.level_lists]
    )


def test_level_arrays_match_lists(make_triangle):
    M, layout = make_triangle(24, 6, density=0.5)
    schedule = schedule_factor(M, layout)
    for arrays, lists in zip(schedule.level_arrays, schedule.level_lists):
        assert [a.tolist() for a in arrays] == lists


def test_wrong_triangle():
    with pytest.raises(MatrixFormatError):
        level_assign(CsrMatrix.from_dense([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(MatrixFormatError):
        level_assign_upper(CsrMatrix.from_dense([[1.0, 0.0], [2.0, 1.0]]))


def test_cross_subdomain_dependency():
    L = lower_from_deps(4, [(2, 1)])
    with pytest.raises(DecompositionViolationError):
        level_assign(L, PartitionLabels.contiguous(4, 2))


def test_unassigned_levels_are_rejected():
    with pytest.raises(MatrixFormatError):
        build_level_schedule(LevelMap(np.array([0, 3])))


def test_scalar_layout_expands_block_labels():
    B = BsrMatrix(2, 2, [0, 1, 2], [0, 1], np.stack([np.eye(3), np.eye(3)]))
    layout = scalar_layout(B, PartitionLabels.contiguous(2, 1))
    np.testing.assert_array_equal(layout.labels, [0, 0, 0, 1, 1, 1])
    assert scalar_layout(B, None).n_subdomains == 1
    with pytest.raises(DimensionMismatchError):
        scalar_layout(B, PartitionLabels.contiguous(4, 2))


def test_block_factor_schedule():
    # strictly lower block factor: block row 1 couples to block row 0 only
    L = BsrMatrix(2, 2, [0, 0, 1], [0], np.full((1, 3, 3), 0.1))
    schedule = schedule_factor(L, PartitionLabels.single(2))
    assert schedule.level_lists == [[[0, 1, 2], [3, 4, 5]]]
