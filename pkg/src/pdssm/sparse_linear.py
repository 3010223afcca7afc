"""Complex matrices with at most one nonzero per column.

A matrix A of this shape is stored as two length-n vectors: ``rows[j]`` gives
the row of column j's sole nonzero and ``vals[j]`` its complex value. The set
of such matrices is closed under matrix multiplication, which makes them the
carrier of the associative scan in :mod:`pdssm.scan`: products, matrix-vector
application and the adjoint application all cost Theta(n) instead of the dense
Theta(n^3)/Theta(n^2).

Transition matrices P * diag(d) with a column-one-hot binary P land exactly in
this set, with ``rows`` the one-hot row indices of P and ``vals`` the diagonal
entries of d.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "OneHotColumnMatrix",
    "identity",
    "compose",
    "apply",
    "apply_adjoint_real",
    "to_dense",
    "from_dense",
    "count_multiplies",
]


@dataclass(frozen=True)
class OneHotColumnMatrix:
    """n x n complex matrix whose column j is vals[j] * e_{rows[j]}.

    Arrays are copied on construction and frozen; instances are safe to share
    across threads and reuse in multiple scans.
    """

    n: int
    rows: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows)
        vals = np.asarray(self.vals, dtype=np.complex128)
        if rows.shape != (self.n,) or vals.shape != (self.n,):
            raise ValueError(
                f"expected shape ({self.n},), got rows {rows.shape} vals {vals.shape}"
            )
        if not np.issubdtype(rows.dtype, np.integer):
            raise ValueError(f"rows must be integers, got dtype {rows.dtype}")
        if self.n > 0 and (rows.min() < 0 or rows.max() >= self.n):
            raise ValueError("row indices out of range")
        rows = rows.astype(np.int64, copy=True)
        vals = vals.copy()
        rows.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "vals", vals)


class count_multiplies:
    """Counts complex multiplications performed by the kernels below.

    Test instrumentation only: kernels report the length of each elementwise
    product they evaluate, which is exactly the number of scalar complex
    multiplies since every kernel does one length-n product.
    """

    _active = None

    def __init__(self):
        self.count = 0

    def __enter__(self):
        count_multiplies._active = self
        return self

    def __exit__(self, *exc):
        count_multiplies._active = None
        return False


def _note_multiplies(k: int):
    c = count_multiplies._active
    if c is not None:
        c.count += k


def identity(n: int) -> OneHotColumnMatrix:
    return OneHotColumnMatrix(n=n, rows=np.arange(n), vals=np.ones(n, dtype=np.complex128))


def _check_same_n(a: OneHotColumnMatrix, b: OneHotColumnMatrix):
    if a.n != b.n:
        raise ValueError(f"size mismatch: {a.n} vs {b.n}")


def compose(a: OneHotColumnMatrix, b: OneHotColumnMatrix) -> OneHotColumnMatrix:
    """Matrix product a @ b in Theta(n): n index lookups and n multiplies.

    Column j of the product is column j of b routed through a: the nonzero of
    b's column j sits at row b.rows[j], which a's column b.rows[j] sends to
    a.rows[b.rows[j]] scaled by a.vals[b.rows[j]].
    """
    _check_same_n(a, b)
    rows = a.rows[b.rows]
    vals = a.vals[b.rows] * b.vals
    _note_multiplies(a.n)
    return OneHotColumnMatrix(n=a.n, rows=rows, vals=vals)


def apply(a: OneHotColumnMatrix, x: np.ndarray) -> np.ndarray:
    """Matrix-vector product a @ x as a scatter-add.

    Columns may collide on a row (a need not be invertible); colliding
    contributions accumulate, matching the dense product exactly.
    """
    x = np.asarray(x)
    if x.shape != (a.n,):
        raise ValueError(f"expected vector of length {a.n}, got shape {x.shape}")
    w = a.vals * x
    _note_multiplies(a.n)
    y_re = np.bincount(a.rows, weights=w.real, minlength=a.n)
    y_im = np.bincount(a.rows, weights=w.imag, minlength=a.n)
    return y_re + 1j * y_im


def apply_adjoint_real(a: OneHotColumnMatrix, g: np.ndarray) -> np.ndarray:
    """Pull a state gradient back through a: h[j] = vals[j] * g[rows[j]].

    Equals the dense row-vector product g @ a. Under the gradient storage
    convention of :mod:`pdssm.model` (d/dRe minus i d/dIm) this is the exact
    adjoint of :func:`apply`, with no complex conjugation; a pure gather plus
    one elementwise product, Theta(n).
    """
    g = np.asarray(g, dtype=np.complex128)
    if g.shape != (a.n,):
        raise ValueError(f"expected vector of length {a.n}, got shape {g.shape}")
    _note_multiplies(a.n)
    return a.vals * g[a.rows]


def to_dense(a: OneHotColumnMatrix) -> np.ndarray:
    m = np.zeros((a.n, a.n), dtype=np.complex128)
    m[a.rows, np.arange(a.n)] = a.vals
    return m


def from_dense(m: np.ndarray) -> OneHotColumnMatrix:
    """Inverse of to_dense. Rejects matrices with >1 nonzero in any column.

    All-zero columns are representable (value 0 at row 0), so the round trip
    through to_dense is exact for every representable matrix.
    """
    m = np.asarray(m, dtype=np.complex128)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    n = m.shape[0]
    nonzero = m != 0
    per_col = nonzero.sum(axis=0)
    if np.any(per_col > 1):
        bad = int(np.argmax(per_col > 1))
        raise ValueError(f"column {bad} has {int(per_col[bad])} nonzeros")
    rows = np.where(per_col == 1, np.argmax(nonzero, axis=0), 0)
    vals = m[rows, np.arange(n)]
    return OneHotColumnMatrix(n=n, rows=rows, vals=vals)
