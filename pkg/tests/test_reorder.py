import numpy as np
import pytest

from subdomain_trisolve.errors import DimensionMismatchError, PartitionError
from subdomain_trisolve.krylov import permute_rhs
from subdomain_trisolve.partition import (
    PartitionLabels,
    Permutation,
    geometric_cuts,
    graph_partition_uniform,
    labels_to_permutation,
)
from subdomain_trisolve.reorder import (
    DecompositionStats,
    count_decomposition,
    drop_inter_partition,
    reorder,
    reorder_bsr,
    reorder_csr,
)
from subdomain_trisolve.sparsemat import CsrMatrix, GridSpec, generate_laplacian_3d, spmv


def tridiagonal(n):
    return CsrMatrix.from_dense(2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1))


def test_reorder_swap():
    A = CsrMatrix.from_dense([[1.0, 2.0], [3.0, 4.0]])
    B = reorder_csr(A, Permutation.from_new_to_old([1, 0]))
    np.testing.assert_array_equal(B.to_dense(), [[4.0, 3.0], [2.0, 1.0]])


def test_reorder_matches_dense_permutation(rng):
    dense = rng.normal(size=(7, 7)) * (rng.random((7, 7)) < 0.5)
    A = CsrMatrix.from_dense(dense)
    n2o = rng.permutation(7)
    B = reorder(A, Permutation.from_new_to_old(n2o))
    np.testing.assert_array_equal(B.to_dense(), dense[np.ix_(n2o, n2o)])
    assert B.nnz == A.nnz


def test_reorder_bsr_moves_blocks_intact(rng):
    A = generate_laplacian_3d(GridSpec(3, 2, 1), layout="bsr3")
    perm = Permutation.from_new_to_old(rng.permutation(6))
    B = reorder_bsr(A, perm)
    expected = A.to_dense()[np.ix_(perm.expand(3).new_to_old, perm.expand(3).new_to_old)]
    np.testing.assert_array_equal(B.to_dense(), expected)


def test_reorder_size_mismatch():
    with pytest.raises(DimensionMismatchError):
        reorder_csr(tridiagonal(4), Permutation.identity(3))


def test_tridiagonal_drop():
    A = tridiagonal(8)
    labels = graph_partition_uniform(A, 2)
    perm = labels_to_permutation(labels)
    kept, stats = drop_inter_partition(reorder(A, perm), labels.permuted(perm))
    assert stats.nnz_before == 22
    assert stats.dropped == 6
    assert stats.nnz_after == 16
    assert stats.dropped_fraction == pytest.approx(6 / 22)
    assert f"{100 * stats.dropped_fraction:.2f}" == "27.27"
    expected = np.kron(np.eye(4), [[2.0, -1.0], [-1.0, 2.0]])
    np.testing.assert_array_equal(kept.to_dense(), expected)


def test_drop_keeps_only_intra_subdomain_entries(rng):
    A = generate_laplacian_3d(GridSpec(4, 4, 2))
    labels = graph_partition_uniform(A, 5, seed=3)
    perm = labels_to_permutation(labels)
    layout = labels.permuted(perm)
    kept, stats = drop_inter_partition(reorder(A, perm), layout)
    rows = kept.row_of_entry
    assert np.all(layout.labels[rows] == layout.labels[kept.col_idx])
    assert stats.nnz_after == kept.nnz
    assert stats.remainder_rows == 32 % 5
    assert np.all(kept.diagonal_positions() >= 0)


def test_drop_label_mismatch():
    with pytest.raises(DimensionMismatchError):
        drop_inter_partition(tridiagonal(4), PartitionLabels.contiguous(3, 2))


@pytest.mark.parametrize("layout", ["scalar", "bsr3"])
def test_spmv_commutes_with_reordering(rng, layout):
    A = generate_laplacian_3d(GridSpec(4, 3, 3), layout)
    for _ in range(5):
        perm = Permutation.from_new_to_old(rng.permutation(36))
        x = rng.normal(size=A.nrows)
        np.testing.assert_allclose(
            spmv(reorder(A, perm), permute_rhs(perm, x)),
            permute_rhs(perm, spmv(A, x)),
            rtol=1e-13,
            atol=1e-13,
        )


@pytest.mark.parametrize("part_size", [3, 5, 8])
def test_drop_is_idempotent(part_size):
    A = generate_laplacian_3d(GridSpec(4, 4, 3))
    labels = graph_partition_uniform(A, part_size, seed=1)
    perm = labels_to_permutation(labels)
    layout = labels.permuted(perm)
    once, _ = drop_inter_partition(reorder(A, perm), layout)
    twice, stats = drop_inter_partition(once, layout)
    assert stats.dropped == 0
    assert stats.nnz_after == once.nnz
    np.testing.assert_array_equal(twice.row_ptr, once.row_ptr)
    np.testing.assert_array_equal(twice.col_idx, once.col_idx)
    np.testing.assert_array_equal(twice.to_dense(), once.to_dense())


@pytest.mark.parametrize(
    "dims, tile, layout",
    [
        ((4, 4, 4), (2, 2, 2), "scalar"),
        ((4, 4, 4), (2, 2, 2), "bsr3"),
        ((6, 4, 2), (3, 2, 1), "scalar"),
        ((8, 4, 4), (4, 4, 2), "bsr3"),
    ],
)
def test_count_matches_assembled(dims, tile, layout):
    grid = GridSpec(*dims)
    labels = geometric_cuts(grid, tile)
    perm = labels_to_permutation(labels)
    A = generate_laplacian_3d(grid, layout)
    _, stats = drop_inter_partition(reorder(A, perm), labels.permuted(perm))
    assert count_decomposition(grid, labels, layout) == stats


@pytest.mark.parametrize(
    "dims, nnz_before, dropped, nnz_after, percent",
    [
        ((128, 128, 128), 131_235_840, 8_552_448, 122_683_392, "6.52"),
        ((256, 128, 128), 262_766_592, 17_399_808, 245_366_784, "6.62"),
    ],
)
def test_count_large_laplacians(dims, nnz_before, dropped, nnz_after, percent):
    grid = GridSpec(*dims)
    stats = count_decomposition(grid, geometric_cuts(grid, (16, 16, 8)), "bsr3")
    assert stats.nnz_before == nnz_before
    assert stats.dropped == dropped
    assert stats.nnz_after == nnz_after
    assert f"{100 * stats.dropped_fraction:.2f}" == percent


def test_count_label_size_mismatch():
    with pytest.raises(PartitionError):
        count_decomposition(GridSpec(2, 2, 2), PartitionLabels.contiguous(4, 2))


def test_stats_to_dict():
    stats = DecompositionStats.from_counts(10, 8, PartitionLabels.contiguous(5, 2))
    assert stats.to_dict() == {
        "nnz_before": 10,
        "nnz_after": 8,
        "dropped": 2,
        "dropped_fraction": 0.2,
        "n_subdomains": 3,
        "rows_per_subdomain": 2,
        "remainder_rows": 1,
    }
