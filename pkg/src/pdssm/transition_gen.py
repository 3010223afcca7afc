"""Input-dependent transition generation: column-routing matrix and diagonal.

From a (real) input vector u the generator produces

  * routing indices: a selector softmax s = softmax(S u) mixes a bank of K
    score matrices into M(u) = sum_k s_k M_k, and each column takes a hardmax
    (argmax over rows, ties to the lowest row index);
  * a complex diagonal: magnitude sigma(W_o(gelu(W_i u + b_i) + b_o)) in
    (0,1)^N and phase 2*pi*sigma(...) in (0,2*pi)^N from two small nets with
    the bias added to the hidden activations, inside the outer weight's
    argument.

The transition A(u) is the routing matrix times diag(magnitude * e^{i phase}),
stored in one-hot-column form.

The hardmax is not differentiable; backward_p implements the straight-through
estimate: gradients w.r.t. the dense routing matrix are pulled back through
the Jacobian of the tempered softmax softmax(M/tau) per column (exact in the
low-temperature limit, and exactly the gradient of the softmax surrogate
forward that p_soft_stack evaluates). For the Gumbel variant the surrogate is
taken at the sampled logits M + G. GELU uses the exact Gaussian CDF so finite
differences are clean.

All forward/backward routines are written for stacks of inputs (T, D); the
single-input functions wrap them. The stacked routines are the ones the model
and benchmark call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import erf

from . import sparse_linear as sl

__all__ = [
    "PdGeneratorParams",
    "GeneratorCache",
    "PGrads",
    "DGrads",
    "gelu",
    "gelu_prime",
    "gen_magnitude",
    "gen_phase",
    "gen_p",
    "gen_p_stochastic",
    "gen_p_dense_inference",
    "assemble_transition",
    "backward_p",
    "backward_d",
    "generate",
    "generate_stack",
    "p_soft_stack",
    "backward_p_stack",
    "backward_d_stack",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_prime(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(z, axis=-1):
    e = z - np.max(z, axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= np.sum(e, axis=axis, keepdims=True)
    return e


@dataclass
class PdGeneratorParams:
    """Selector, score bank and the two sigmoid nets.

    Shapes: S (K, D); bank (K, N, N); each net has input weights (H, D),
    input bias (H,), output weights (N, H) and a hidden-side bias (H,) that is
    added to the GELU output before the output weights apply. tau is the
    straight-through softmax temperature; mag_cap_eps > 0 clips magnitudes to
    1 - eps (hard ceiling, used by stability experiments).
    """

    S: np.ndarray
    bank: np.ndarray
    wm_i: np.ndarray
    bm_i: np.ndarray
    wm_o: np.ndarray
    bm_o: np.ndarray
    wp_i: np.ndarray
    bp_i: np.ndarray
    wp_o: np.ndarray
    bp_o: np.ndarray
    tau: float = 1.0
    mag_cap_eps: float = 0.0

    def __post_init__(self):
        k, d = self.S.shape
        if self.bank.shape[0] != k or self.bank.shape[1] != self.bank.shape[2]:
            raise ValueError(f"bank shape {self.bank.shape} inconsistent with S {self.S.shape}")
        n = self.bank.shape[1]
        h = self.wm_i.shape[0]
        for name, want in (
            ("wm_i", (h, d)), ("bm_i", (h,)), ("wm_o", (n, h)), ("bm_o", (h,)),
            ("wp_i", (h, d)), ("bp_i", (h,)), ("wp_o", (n, h)), ("bp_o", (h,)),
        ):
            got = getattr(self, name).shape
            if got != want:
                raise ValueError(f"{name}: expected shape {want}, got {got}")

    @property
    def n(self):
        return self.bank.shape[1]

    @property
    def dim(self):
        return self.S.shape[1]


def _net_forward(w_i, b_i, w_o, b_o, u):
    """Returns (pre-sigmoid output (T, N), hidden pre-activation (T, H))."""
    z = u @ w_i.T + b_i
    hidden = gelu(z) + b_o
    return hidden @ w_o.T, z


def _sigmoid(y):
    # exp may overflow for very negative preactivations; the limit value 0.0
    # is exactly what saturated compiled models rely on, so keep it silent
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-y))


def _magnitude_stack(params, u):
    y, z = _net_forward(params.wm_i, params.bm_i, params.wm_o, params.bm_o, u)
    return _sigmoid(y), z


def _phase_stack(params, u):
    y, z = _net_forward(params.wp_i, params.bp_i, params.wp_o, params.bp_o, u)
    return 2.0 * np.pi * _sigmoid(y), z


def _mix_scores(params, u):
    s = softmax(u @ params.S.T, axis=-1)
    mu = np.einsum("tk,kij->tij", s, params.bank)
    return s, mu


@dataclass
class GeneratorCache:
    """Everything the backward passes need, for a stack of T inputs."""

    params: PdGeneratorParams
    u: np.ndarray
    s: Optional[np.ndarray]
    mu: Optional[np.ndarray]
    indices: Optional[np.ndarray]
    z_mag: Optional[np.ndarray]
    mag_raw: Optional[np.ndarray]
    uncapped: Optional[np.ndarray]
    z_phase: Optional[np.ndarray]
    phase: Optional[np.ndarray]
    gumbel: Optional[np.ndarray] = None
    soft_tau: Optional[float] = None

    @property
    def n(self):
        return self.params.n


@dataclass
class PGrads:
    S: np.ndarray
    bank: np.ndarray
    u: np.ndarray


@dataclass
class DGrads:
    wm_i: np.ndarray
    bm_i: np.ndarray
    wm_o: np.ndarray
    bm_o: np.ndarray
    wp_i: np.ndarray
    bp_i: np.ndarray
    wp_o: np.ndarray
    bp_o: np.ndarray
    u: np.ndarray


def generate_stack(params, u, variant="hard", rng=None, with_phase=True, with_p=True):
    """Full generator step for a (T, D) input stack.

    Returns (rows, p_soft, vals, cache): rows are per-column argmax indices
    (None for soft variant), p_soft the dense column-stochastic matrices (None
    unless variant == "soft"), vals the complex diagonal entries.
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if u.shape[1] != params.dim:
        raise ValueError(f"input dim {u.shape[1]} != selector dim {params.dim}")
    t = u.shape[0]
    s = mu = indices = gumbel = p_soft = soft_tau = None
    if with_p:
        s, mu = _mix_scores(params, u)
        if variant == "hard":
            indices = np.argmax(mu, axis=1)
        elif variant == "stochastic":
            if rng is None:
                raise ValueError("stochastic variant needs an rng")
            gumbel = rng.gumbel(size=mu.shape)
            indices = np.argmax(mu + gumbel, axis=1)
        elif variant == "soft":
            soft_tau = params.tau
            p_soft = softmax(mu / soft_tau, axis=1)
        else:
            raise ValueError(f"unknown variant {variant!r}")
    else:
        indices = np.broadcast_to(np.arange(params.n), (t, params.n))

    mag_raw, z_mag = _magnitude_stack(params, u)
    if params.mag_cap_eps > 0.0:
        cap = 1.0 - params.mag_cap_eps
        uncapped = mag_raw < cap
        mag = np.minimum(mag_raw, cap)
    else:
        uncapped = None
        mag = mag_raw
    if with_phase:
        phase, z_phase = _phase_stack(params, u)
        vals = mag * np.exp(1j * phase)
    else:
        phase = z_phase = None
        vals = mag.astype(np.complex128)

    cache = GeneratorCache(
        params=params, u=u, s=s, mu=mu, indices=indices,
        z_mag=z_mag, mag_raw=mag_raw, uncapped=uncapped,
        z_phase=z_phase, phase=phase, gumbel=gumbel, soft_tau=soft_tau,
    )
    return indices, p_soft, vals, cache


def generate(params, u, variant="hard", rng=None):
    rows, p_soft, vals, cache = generate_stack(params, u[None], variant=variant, rng=rng)
    return (
        rows[0] if rows is not None else None,
        p_soft[0] if p_soft is not None else None,
        vals[0],
        cache,
    )


def p_soft_stack(params, u, tau):
    """Dense softmax(M(u)/tau) columns: the smooth surrogate of the hardmax."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    s, mu = _mix_scores(params, u)
    return softmax(mu / tau, axis=1), s, mu


def gen_magnitude(params, u):
    return _magnitude_stack(params, np.asarray(u, dtype=np.float64)[None])[0][0]


def gen_phase(params, u):
    return _phase_stack(params, np.asarray(u, dtype=np.float64)[None])[0][0]


def gen_p(params, u):
    rows, _, _, cache = generate_stack(params, np.asarray(u)[None], variant="hard")
    return rows[0], cache


def gen_p_stochastic(params, u, rng):
    rows, _, _, cache = generate_stack(params, np.asarray(u)[None], variant="stochastic", rng=rng)
    return rows[0], cache


def gen_p_dense_inference(params, u, training=False):
    """Column-stochastic softmax(M(u)) matrix; inference-time ablation only."""
    if training:
        raise ValueError("dense softmax routing is an inference-only mode")
    u = np.asarray(u, dtype=np.float64)
    _, mu = _mix_scores(params, u[None])
    return softmax(mu[0], axis=0)


def assemble_transition(p_indices, magnitude, phase) -> sl.OneHotColumnMatrix:
    vals = np.asarray(magnitude) * np.exp(1j * np.asarray(phase))
    return sl.OneHotColumnMatrix(n=len(p_indices), rows=np.asarray(p_indices), vals=vals)


# --- backward ---------------------------------------------------------------


def backward_p_stack(cache, grad_p):
    """Straight-through gradients from dense routing-matrix gradients.

    grad_p is (T, N, N) with grad_p[t, i, j] = dL/dP_t[i, j]. Routing through
    the per-column softmax Jacobian at temperature tau gives grad_M; the bank
    and selector gradients follow by linearity, and the selector softmax gives
    grad_S and the input contribution.
    """
    params = cache.params
    if cache.mu is None:
        raise ValueError("cache has no routing information")
    tau = cache.soft_tau if cache.soft_tau is not None else params.tau
    logits = cache.mu if cache.gumbel is None else cache.mu + cache.gumbel
    p = softmax(logits if tau == 1.0 else logits / tau, axis=1)
    col_dot = np.sum(p * grad_p, axis=1, keepdims=True)
    grad_mu = p * (grad_p - col_dot)
    if tau != 1.0:
        grad_mu /= tau
    # contractions over positions as flat matmuls; einsum stays off BLAS here
    gm_flat = grad_mu.reshape(grad_mu.shape[0], -1)
    grad_bank = (cache.s.T @ gm_flat).reshape(params.bank.shape)
    grad_s = gm_flat @ params.bank.reshape(params.bank.shape[0], -1).T
    sdot = np.sum(cache.s * grad_s, axis=-1, keepdims=True)
    grad_logits = cache.s * (grad_s - sdot)
    grad_big_s = grad_logits.T @ cache.u
    grad_u = grad_logits @ params.S
    return PGrads(S=grad_big_s, bank=grad_bank, u=grad_u)


def backward_p(cache, grad_p):
    n = cache.n
    grad_p = np.asarray(grad_p, dtype=np.float64)
    if grad_p.shape != (n, n):
        raise ValueError(f"grad_p: expected ({n}, {n}), got {grad_p.shape}")
    g = backward_p_stack(cache, grad_p[None])
    return PGrads(S=g.S, bank=g.bank, u=g.u[0])


def _net_backward(w_i, b_i, w_o, b_o, u, z, g_y):
    hidden = gelu(z) + b_o
    g_wo = g_y.T @ hidden
    g_hidden = g_y @ w_o
    g_bo = g_hidden.sum(axis=0)
    g_z = g_hidden * gelu_prime(z)
    g_wi = g_z.T @ u
    g_bi = g_z.sum(axis=0)
    g_u = g_z @ w_i
    return g_wi, g_bi, g_wo, g_bo, g_u


def backward_d_stack(cache, grad_vals):
    """Gradients of both diagonal nets from complex diagonal-value gradients.

    grad_vals follows the d/dRe - i d/dIm storage convention: for
    vals = m e^{i phi}, dL/dm = Re(e^{i phi} g) and dL/dphi = -m Im(e^{i phi} g).
    """
    params = cache.params
    if cache.phase is not None:
        rot = np.exp(1j * cache.phase) * grad_vals
        grad_mag = rot.real
        mag_eff = cache.mag_raw if cache.uncapped is None else np.minimum(
            cache.mag_raw, 1.0 - params.mag_cap_eps)
        grad_phase = -mag_eff * rot.imag
    else:
        grad_mag = grad_vals.real
        grad_phase = None
    if cache.uncapped is not None:
        grad_mag = grad_mag * cache.uncapped
    g_y_mag = grad_mag * cache.mag_raw * (1.0 - cache.mag_raw)
    gm = _net_backward(params.wm_i, params.bm_i, params.wm_o, params.bm_o,
                       cache.u, cache.z_mag, g_y_mag)
    if grad_phase is not None:
        sig = cache.phase / (2.0 * np.pi)
        g_y_ph = grad_phase * 2.0 * np.pi * sig * (1.0 - sig)
        gp = _net_backward(params.wp_i, params.bp_i, params.wp_o, params.bp_o,
                           cache.u, cache.z_phase, g_y_ph)
    else:
        gp = tuple(np.zeros_like(a) for a in
                   (params.wp_i, params.bp_i, params.wp_o, params.bp_o)) + (
                       np.zeros_like(cache.u),)
    return DGrads(
        wm_i=gm[0], bm_i=gm[1], wm_o=gm[2], bm_o=gm[3],
        wp_i=gp[0], bp_i=gp[1], wp_o=gp[2], bp_o=gp[3],
        u=gm[4] + gp[4],
    )


def backward_d(cache, grad_vals):
    grad_vals = np.asarray(grad_vals, dtype=np.complex128)
    if grad_vals.shape != (cache.n,):
        raise ValueError(f"grad_vals: expected ({cache.n},), got {grad_vals.shape}")
    g = backward_d_stack(cache, grad_vals[None])
    return DGrads(**{k: (v[0] if k == "u" else v) for k, v in g.__dict__.items()})
