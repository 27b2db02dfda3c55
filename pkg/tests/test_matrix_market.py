import numpy as np
import pytest

from subdomain_trisolve.errors import (
    IndexOutOfBoundsError,
    MalformedHeaderError,
    MatrixMarketError,
    UnsupportedFieldError,
)
from subdomain_trisolve.matrix_market import read_matrix_market, write_matrix_market
from subdomain_trisolve.sparsemat import GridSpec, generate_laplacian_3d


def _write(tmp_path, text, name="m.mtx"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.mark.parametrize(
    "text, dense",
    [
        (
            "%%MatrixMarket matrix coordinate real general\n"
            "% a comment\n"
            "2 2 3\n"
            "1 1 4.0\n"
            "2 1 2.0\n"
            "2 2 3.0\n",
            [[4.0, 0.0], [2.0, 3.0]],
        ),
        (
            "%%MatrixMarket matrix coordinate real symmetric\n"
            "2 2 2\n"
            "1 1 4.0\n"
            "2 1 -1.0\n",
            [[4.0, -1.0], [-1.0, 0.0]],
        ),
        (
            "%%MatrixMarket matrix coordinate real general\n"
            "2 2 3\n"
            "1 1 1.5\n"
            "1 1 2.5\n"
            "2 2 1.0\n",
            [[4.0, 0.0], [0.0, 1.0]],
        ),
    ],
    ids=["general", "symmetric", "duplicates-summed"],
)
def test_read(tmp_path, text, dense):
    A = read_matrix_market(_write(tmp_path, text))
    np.testing.assert_array_equal(A.to_dense(), dense)


def test_read_keeps_explicit_zero(tmp_path):
    text = (
        "%%MatrixMarket matrix coordinate real general\n"
        "2 2 2\n"
        "1 1 1.0\n"
        "1 2 0.0\n"
    )
    A = read_matrix_market(_write(tmp_path, text))
    assert A.nnz == 2
    np.testing.assert_array_equal(A.col_idx, [0, 1])


@pytest.mark.parametrize(
    "text, error",
    [
        (
            "%%MatrixMarket matrix coordinate complex general\n2 2 1\n1 1 1.0 0.0\n",
            UnsupportedFieldError,
        ),
        (
            "%%MatrixMarket matrix coordinate real skew-symmetric\n2 2 1\n2 1 1.0\n",
            UnsupportedFieldError,
        ),
        (
            "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n",
            IndexOutOfBoundsError,
        ),
        (
            "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n",
            MalformedHeaderError,
        ),
        ("not a matrix market file\n", MalformedHeaderError),
    ],
    ids=["complex", "skew", "out-of-bounds", "short-body", "no-banner"],
)
def test_read_rejects(tmp_path, text, error):
    with pytest.raises(error):
        read_matrix_market(_write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(MatrixMarketError):
        read_matrix_market(tmp_path / "absent.mtx")


def test_write_then_read_is_exact(tmp_path):
    A = generate_laplacian_3d(GridSpec(3, 2, 2))
    path = tmp_path / "laplacian.mtx"
    write_matrix_market(A, path)
    assert path.exists()
    assert path.read_text().startswith("%%MatrixMarket matrix coordinate real general")
    B = read_matrix_market(path)
    np.testing.assert_array_equal(B.row_ptr, A.row_ptr)
    np.testing.assert_array_equal(B.col_idx, A.col_idx)
    np.testing.assert_array_equal(B.values, A.values)
