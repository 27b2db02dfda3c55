import logging
import os

import numpy as np
import scipy.io
import scipy.sparse as sp

from subdomain_trisolve.errors import (
    IndexOutOfBoundsError,
    MalformedHeaderError,
    MatrixMarketError,
    UnsupportedFieldError,
)
from subdomain_trisolve.sparsemat import CsrMatrix

logger = logging.getLogger(__name__)

SUPPORTED_SYMMETRY = ("general", "symmetric")


def _read_header(path: str | os.PathLike) -> tuple[int, int, int, str]:
    """Validates the banner and size line.

    Returns:
        (nrows, ncols, entries, symmetry)
    """
    try:
        with open(path, "r") as f:
            banner = f.readline()
        if not banner.lower().startswith("%%matrixmarket"):
            raise MalformedHeaderError(f"Missing %%MatrixMarket banner in {path}")
        nrows, ncols, entries, fmt, field, symmetry = scipy.io.mminfo(path)
    except OSError as e:
        raise MatrixMarketError(f"Cannot read {path}: {e}") from e
    except (ValueError, IndexError) as e:
        raise MalformedHeaderError(f"Malformed Matrix Market header in {path}: {e}") from e
    if fmt != "coordinate":
        raise MalformedHeaderError(f"Only coordinate format is supported, got '{fmt}'")
    if field != "real":
        raise UnsupportedFieldError(f"Only real fields are supported, got '{field}'")
    if symmetry not in SUPPORTED_SYMMETRY:
        raise UnsupportedFieldError(
            f"Only general or symmetric matrices are supported, got '{symmetry}'"
        )
    return nrows, ncols, entries, symmetry


def _read_triplets(path: str | os.PathLike, entries: int) -> np.ndarray:
    with open(path, "r") as f:
        lines = [line for line in f if line.strip() and not line.lstrip().startswith("%")]
    body = lines[1:]
    if len(body) != entries:
        raise MalformedHeaderError(
            f"Header announces {entries} entries but {len(body)} were found in {path}"
        )
    if not body:
        return np.empty((0, 3))
    try:
        return np.loadtxt(body, ndmin=2)
    except ValueError as e:
        raise MalformedHeaderError(f"Unparseable entry line in {path}: {e}") from e


def read_matrix_market(path: str | os.PathLike) -> CsrMatrix:
    """Reads a real coordinate Matrix Market file into sorted CSR.

    Symmetric files are expanded to general storage, duplicate coordinates are
    summed, and explicitly stored zeros stay in the pattern.
    """
    nrows, ncols, entries, symmetry = _read_header(path)
    triplets = _read_triplets(path, entries)
    if triplets.shape[1] != 3:
        raise MalformedHeaderError(
            f"Expected 'row col value' entry lines, got {triplets.shape[1]} columns"
        )
    rows = triplets[:, 0].astype(np.int64) - 1
    cols = triplets[:, 1].astype(np.int64) - 1
    vals = triplets[:, 2]
    bad = (rows < 0) | (rows >= nrows) | (cols < 0) | (cols >= ncols)
    if np.any(bad):
        first = int(np.nonzero(bad)[0][0])
        raise IndexOutOfBoundsError(
            f"Entry {first + 1} at ({rows[first] + 1}, {cols[first] + 1}) "
            f"is outside the {nrows}x{ncols} matrix"
        )
    if symmetry == "symmetric":
        off = rows != cols
        rows, cols, vals = (
            np.concatenate((rows, cols[off])),
            np.concatenate((cols, rows[off])),
            np.concatenate((vals, vals[off])),
        )
    A = CsrMatrix.from_scipy(sp.coo_matrix((vals, (rows, cols)), shape=(nrows, ncols)))
    logger.info(f"Read {nrows}x{ncols} matrix with {A.nnz} nonzeros from {path}.")
    return A


def write_matrix_market(A: CsrMatrix, path: str | os.PathLike) -> None:
    """Writes `A` as a general, 1-based, row-major sorted coordinate file."""
    # an open handle stops scipy from appending ".mtx" to the path
    with open(path, "wb") as f:
        scipy.io.mmwrite(
            f,
            A.to_scipy().tocoo(),
            field="real",
            precision=17,
            symmetry="general",
        )
    logger.info(f"Wrote {A.nrows}x{A.ncols} matrix with {A.nnz} nonzeros to {path}.")
