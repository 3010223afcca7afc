"""Associative scan over the linear recurrence x_t = A_t x_{t-1} + b_t.

Scan elements pair a one-hot-column transition with an input vector; the
combine rule

    combine(later, earlier) = (A_later A_earlier, A_later b_earlier + b_later)

is associative, so all L states can be computed by a work-efficient
up-sweep/down-sweep tree in Theta(log L) sequential steps and Theta(L) combine
evaluations, each combine costing Theta(N). The parallel path stores only
Theta(L N) complex values; it never forms a dense L x N^2 buffer, which the
test-build instrumentation below can verify.

The backward pass runs the reverse recurrence

    dL/dx_t = direct_t + dL/dx_{t+1} . A_{t+1}

where the row-vector product is the gather h[j] = vals[j] * g[rows[j]]
(see sparse_linear.apply_adjoint_real for the gradient convention). A
reverse-scan mode expresses the same recurrence as an associative scan over
(matrix, row-vector) pairs and must agree with the sequential default.

Batched entry points (scan_states, scan_states_diag, backward_stacked,
local_param_grads_stacked) operate on stacked (batch, time, state) arrays and
are the code paths the model and the runtime benchmark share. Determinism:
every kernel is plain numpy with a fixed reduction order, so repeated runs on
identical inputs are bitwise identical regardless of the advisory worker
count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import sparse_linear as sl

__all__ = [
    "ScanElement",
    "combine",
    "forward_sequential",
    "forward_parallel",
    "backward_states",
    "local_param_grads",
    "scan_states",
    "scan_states_diag",
    "backward_stacked",
    "local_param_grads_stacked",
    "scan_states_dense",
    "instrumentation",
    "next_pow2",
]


@dataclass(frozen=True)
class ScanElement:
    """One step of the recurrence: transition a and input b."""

    a: sl.OneHotColumnMatrix
    b: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.complex128)
        if b.shape != (self.a.n,):
            raise ValueError(f"b must have shape ({self.a.n},), got {b.shape}")
        b = b.copy()
        b.flags.writeable = False
        object.__setattr__(self, "b", b)


def combine(later: ScanElement, earlier: ScanElement) -> ScanElement:
    if later.a.n != earlier.a.n:
        raise ValueError("size mismatch")
    return ScanElement(
        a=sl.compose(later.a, earlier.a),
        b=sl.apply(later.a, earlier.b) + later.b,
    )


def next_pow2(k: int) -> int:
    m = 1
    while m < k:
        m *= 2
    return m


# --- test-build instrumentation -------------------------------------------


class instrumentation:
    """Records combine-pair counts and the largest buffer the scan allocates."""

    _active = None

    def __init__(self):
        self.combined_pairs = 0
        self.max_alloc_elems = 0

    def __enter__(self):
        instrumentation._active = self
        return self

    def __exit__(self, *exc):
        instrumentation._active = None
        return False


def _note_alloc(size: int):
    s = instrumentation._active
    if s is not None and size > s.max_alloc_elems:
        s.max_alloc_elems = size


def _note_pairs(k: int):
    s = instrumentation._active
    if s is not None:
        s.combined_pairs += k


# --- batched primitives ----------------------------------------------------


def _scatter_add(rows, w):
    """out[..., i] = sum over j with rows[..., j] == i of w[..., j]."""
    lead = int(np.prod(rows.shape[:-1], dtype=np.int64))
    n = rows.shape[-1]
    idx = (rows.reshape(lead, n) + (np.arange(lead, dtype=np.int64) * n)[:, None]).ravel()
    _note_alloc(idx.size)
    flat = w.reshape(lead * n)
    out = np.bincount(idx, weights=flat.real, minlength=lead * n).astype(np.complex128)
    out.imag = np.bincount(idx, weights=flat.imag, minlength=lead * n)
    _note_alloc(out.size)
    return out.reshape(w.shape)


def _op_onehot(left, right):
    # left = earlier prefix, right = later block; product is right o left
    r_e, v_e, b_e = left
    r_l, v_l, b_l = right
    _note_pairs(int(np.prod(r_e.shape[:-1], dtype=np.int64)))
    rows = np.take_along_axis(r_l, r_e, axis=-1)
    vals = np.take_along_axis(v_l, r_e, axis=-1) * v_e
    b = _scatter_add(r_l, v_l * b_e) + b_l
    for a in (rows, vals, b):
        _note_alloc(a.size)
    return rows, vals, b


def _op_diag(left, right):
    v_e, b_e = left
    v_l, b_l = right
    _note_pairs(int(np.prod(v_e.shape[:-1], dtype=np.int64)))
    return v_l * v_e, v_l * b_e + b_l


def _op_reverse(left, right):
    # left = prefix over later times, right = next element going backward;
    # composed map g -> g . (M_left M_right) + (v_left . M_right + v_right)
    r_p, v_p, c_p = left
    r_e, v_e, c_e = right
    _note_pairs(int(np.prod(r_p.shape[:-1], dtype=np.int64)))
    rows = np.take_along_axis(r_p, r_e, axis=-1)
    vals = np.take_along_axis(v_p, r_e, axis=-1) * v_e
    c = v_e * np.take_along_axis(c_p, r_e, axis=-1) + c_e
    for a in (rows, vals, c):
        _note_alloc(a.size)
    return rows, vals, c


def _exclusive_scan_inplace(arrs, op, set_identity):
    """Blelloch up-sweep/down-sweep; arrs become exclusive prefixes in place.

    arrs are (batch, M, state) with M a power of two; op(left, right) combines
    a left-neighbour prefix block with the block to its right.
    """
    m = arrs[0].shape[1]
    levels = m.bit_length() - 1
    for d in range(levels):
        half, stride = 1 << d, 1 << (d + 1)
        left = tuple(a[:, half - 1 : m : stride] for a in arrs)
        right = tuple(a[:, stride - 1 : m : stride] for a in arrs)
        for a, v in zip(arrs, op(left, right)):
            a[:, stride - 1 : m : stride] = v
    set_identity(arrs, m - 1)
    for d in reversed(range(levels)):
        half, stride = 1 << d, 1 << (d + 1)
        saved = tuple(a[:, half - 1 : m : stride].copy() for a in arrs)
        for s in saved:
            _note_alloc(s.size)
        for a in arrs:
            a[:, half - 1 : m : stride] = a[:, stride - 1 : m : stride]
        incoming = tuple(a[:, half - 1 : m : stride] for a in arrs)
        for a, v in zip(arrs, op(incoming, saved)):
            a[:, stride - 1 : m : stride] = v


def _ident_onehot(arrs, where):
    r, v, b = arrs
    r[:, where] = np.arange(r.shape[-1])
    v[:, where] = 1.0
    b[:, where] = 0.0


def _ident_diag(arrs, where):
    v, b = arrs
    v[:, where] = 1.0
    b[:, where] = 0.0


def scan_states(rows, vals, b, x0):
    """All L states of the recurrence, batched: inputs (B, L, N), x0 (B, N).

    Inclusive scan with a prepended (identity, x0) element; arbitrary L is
    handled by padding with the monoid identity (identity matrix, zero input),
    which leaves every real prefix untouched.
    """
    rows = np.asarray(rows, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.complex128)
    bi = np.asarray(b, dtype=np.complex128)
    x0 = np.asarray(x0, dtype=np.complex128)
    B, L, N = rows.shape
    m = next_pow2(L + 2)
    R = np.empty((B, m, N), dtype=np.int64)
    V = np.empty((B, m, N), dtype=np.complex128)
    Bv = np.empty((B, m, N), dtype=np.complex128)
    for a in (R, V, Bv):
        _note_alloc(a.size)
    R[:, 0], V[:, 0], Bv[:, 0] = np.arange(N), 1.0, x0
    R[:, 1 : L + 1], V[:, 1 : L + 1], Bv[:, 1 : L + 1] = rows, vals, bi
    _ident_onehot((R, V, Bv), slice(L + 1, m))
    _exclusive_scan_inplace((R, V, Bv), _op_onehot, _ident_onehot)
    return Bv[:, 2 : L + 2].copy()


def scan_states_diag(vals, b, x0):
    """Diagonal-transition variant of scan_states (no row routing at all)."""
    vals = np.asarray(vals, dtype=np.complex128)
    bi = np.asarray(b, dtype=np.complex128)
    x0 = np.asarray(x0, dtype=np.complex128)
    B, L, N = vals.shape
    m = next_pow2(L + 2)
    V = np.empty((B, m, N), dtype=np.complex128)
    Bv = np.empty((B, m, N), dtype=np.complex128)
    V[:, 0], Bv[:, 0] = 1.0, x0
    V[:, 1 : L + 1], Bv[:, 1 : L + 1] = vals, bi
    _ident_diag((V, Bv), slice(L + 1, m))
    _exclusive_scan_inplace((V, Bv), _op_diag, _ident_diag)
    return Bv[:, 2 : L + 2].copy()


def scan_states_dense(a, b, x0):
    """Dense-transition recurrence, sequential over time: a is (B, L, N, N).

    Small-scale and inference-only path (soft transition matrices); the
    structured scans above are the ones with scan-time guarantees.
    """
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    B, L, N, _ = a.shape
    states = np.empty((B, L, N), dtype=np.complex128)
    x = np.broadcast_to(np.asarray(x0, dtype=np.complex128), (B, N))
    for t in range(L):
        x = np.einsum("bij,bj->bi", a[:, t], x) + b[:, t]
        states[:, t] = x
    return states


def backward_stacked(direct, rows_a, vals_a, mode="sequential"):
    """Total state gradients for a batch: direct (B, L, N), A_2..A_L stacked.

    rows_a/vals_a have shape (B, L-1, N); entry t-2 is transition A_t.
    """
    direct = np.asarray(direct, dtype=np.complex128)
    B, L, N = direct.shape
    if rows_a.shape != (B, L - 1, N):
        raise ValueError(f"expected transitions (B, L-1, N), got {rows_a.shape}")
    if mode == "sequential":
        out = np.empty_like(direct)
        out[:, L - 1] = direct[:, L - 1]
        for t in range(L - 2, -1, -1):
            gathered = np.take_along_axis(out[:, t + 1], rows_a[:, t], axis=-1)
            out[:, t] = direct[:, t] + vals_a[:, t] * gathered
        return out
    if mode != "scan":
        raise ValueError(f"unknown mode {mode!r}")
    m = next_pow2(L + 1)
    R = np.empty((B, m, N), dtype=np.int64)
    V = np.empty((B, m, N), dtype=np.complex128)
    C = np.empty((B, m, N), dtype=np.complex128)
    R[:, 0], V[:, 0] = np.arange(N), 1.0  # A_{L+1} = identity
    R[:, 1:L], V[:, 1:L] = rows_a[:, ::-1], vals_a[:, ::-1]
    C[:, :L] = direct[:, ::-1]
    _ident_onehot((R, V, C), slice(L, m))
    _exclusive_scan_inplace((R, V, C), _op_reverse, _ident_onehot)
    return C[:, 1 : L + 1][:, ::-1].copy()


def local_param_grads_stacked(rows, prev_states, total_grads):
    """Per-step gradients w.r.t. transition values and inputs.

    grad_vals[t, j] = g_t[rows_t[j]] * x_{t-1}[j]; grad_b = g. prev_states is
    the (B, L, N) array of x_0 .. x_{L-1}.
    """
    grad_vals = np.take_along_axis(total_grads, rows, axis=-1) * prev_states
    return grad_vals, total_grads


# --- per-sequence object API ------------------------------------------------


def forward_sequential(elements: Sequence[ScanElement], x0) -> np.ndarray:
    x = np.asarray(x0, dtype=np.complex128)
    n = x.shape[0]
    states = np.empty((len(elements), n), dtype=np.complex128)
    for t, e in enumerate(elements):
        x = sl.apply(e.a, x) + e.b
        states[t] = x
    return states


def _stack(elements, n):
    rows = np.stack([e.a.rows for e in elements])[None]
    vals = np.stack([e.a.vals for e in elements])[None]
    b = np.stack([e.b for e in elements])[None]
    return rows, vals, b


def forward_parallel(elements: Sequence[ScanElement], x0, workers: int | None = None) -> np.ndarray:
    """Same states as forward_sequential via the associative tree scan.

    workers is advisory (recorded by callers such as the benchmark); the numpy
    kernels here are single-process and bitwise deterministic either way.
    """
    x0 = np.asarray(x0, dtype=np.complex128)
    n = x0.shape[0]
    if not elements:
        return np.zeros((0, n), dtype=np.complex128)
    for e in elements:
        if e.a.n != n:
            raise ValueError("element size mismatch")
    rows, vals, b = _stack(elements, n)
    return scan_states(rows, vals, b, x0[None])[0]


def backward_states(direct_grads, transitions, mode="sequential") -> np.ndarray:
    """Total dL/dx_t for t = 1..L from per-step direct gradients.

    transitions are A_2 .. A_L (length L-1): A_{t+1} carries the gradient from
    x_{t+1} back to x_t.
    """
    direct = np.asarray(direct_grads, dtype=np.complex128)
    L, n = direct.shape
    if len(transitions) != L - 1:
        raise ValueError(f"expected {L - 1} transitions, got {len(transitions)}")
    if L == 1:
        rows_a = np.zeros((1, 0, n), dtype=np.int64)
        vals_a = np.zeros((1, 0, n), dtype=np.complex128)
    else:
        rows_a = np.stack([a.rows for a in transitions])[None]
        vals_a = np.stack([a.vals for a in transitions])[None]
    return backward_stacked(direct[None], rows_a, vals_a, mode=mode)[0]


def local_param_grads(elements, x0, states, total_grads):
    rows = np.stack([e.a.rows for e in elements])[None]
    prev = np.concatenate([np.asarray(x0, dtype=np.complex128)[None, None], states[None, :-1]], axis=1)
    gv, gb = local_param_grads_stacked(rows, prev, np.asarray(total_grads)[None])
    return gv[0], gb[0]
