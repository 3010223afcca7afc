"""Stacked recurrent sequence model with generated sparse transitions.

Each layer runs the linear recurrence x_t = A(u_t) x_{t-1} + B_in u_t where
A(u_t) is produced per step by the transition generator: a column one-hot
routing matrix times a complex diagonal, or just the diagonal in the reduced
modes. Layers read the state out as (Re x || Im x).

The backward pass is hand-written. Gradients of the real loss with respect to
any complex quantity z = a + ib are stored as g = dL/da - i dL/db, which makes
every chain rule a plain complex multiply with no conjugation anywhere; real
parameters receive Re(z * g) style contractions. See scan.backward_stacked and
transition_gen.backward_* for the pieces this composes.

Routing variants:
  * "hard": deterministic per-column argmax, gradients via straight-through;
  * "stochastic": Gumbel-perturbed argmax, straight-through at the sampled
    logits;
  * "soft": dense tempered-softmax matrices. This is the smooth surrogate the
    gradient engine is exact for (finite differences of the soft forward match
    the backward pass to machine-level accuracy), and it doubles as the
    dense-softmax inference ablation.
"""

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import scan
from . import transition_gen as tg

RMS_EPS = 1e-8

_MODES = ("pd", "complex_diagonal", "real_diagonal")
_READOUTS = ("linear", "nonlinear")


@dataclass
class ModelConfig:
    vocab: int
    dim: int
    state: int
    bank: int
    hidden: int
    depth: int
    n_classes: int
    mode: str = "pd"
    readout: str = "linear"
    readout_hidden: Optional[int] = None
    norm: bool = False
    residual: bool = False
    skip_diag: bool = False
    tau: float = 1.0
    mag_cap_eps: float = 0.0

    def __post_init__(self):
        for name in ("vocab", "dim", "state", "bank", "hidden", "depth", "n_classes"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.readout not in _READOUTS:
            raise ValueError(f"readout must be one of {_READOUTS}, got {self.readout!r}")
        if self.readout_hidden is None and self.readout == "nonlinear":
            self.readout_hidden = 2 * self.state
        if not 0.0 <= self.mag_cap_eps < 1.0:
            raise ValueError("mag_cap_eps must be in [0, 1)")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")


@dataclass
class LayerParams:
    gen: tg.PdGeneratorParams
    b_in_re: np.ndarray
    b_in_im: np.ndarray
    gain: Optional[np.ndarray] = None
    out_w: Optional[np.ndarray] = None
    out_b: Optional[np.ndarray] = None
    skip: Optional[np.ndarray] = None


@dataclass
class ModelParams:
    config: ModelConfig
    embed: np.ndarray
    layers: list
    readout: dict
    x0_re: np.ndarray
    x0_im: np.ndarray
    _version: int = 0

    def bump(self):
        """Declare in-place parameter mutation; invalidates existing tapes."""
        self._version += 1


def _gen_fields(mode):
    if mode == "pd":
        return ("S", "bank", "wm_i", "bm_i", "wm_o", "bm_o",
                "wp_i", "bp_i", "wp_o", "bp_o")
    if mode == "complex_diagonal":
        return ("wm_i", "bm_i", "wm_o", "bm_o", "wp_i", "bp_i", "wp_o", "bp_o")
    return ("wm_i", "bm_i", "wm_o", "bm_o")


def _param_entries(params):
    cfg = params.config
    yield "embed", params.embed
    for i, layer in enumerate(params.layers):
        for f in _gen_fields(cfg.mode):
            yield f"layers.{i}.gen.{f}", getattr(layer.gen, f)
        yield f"layers.{i}.b_in.re", layer.b_in_re
        yield f"layers.{i}.b_in.im", layer.b_in_im
        if cfg.norm:
            yield f"layers.{i}.gain", layer.gain
        if i < cfg.depth - 1:
            yield f"layers.{i}.out.w", layer.out_w
            yield f"layers.{i}.out.b", layer.out_b
            if cfg.skip_diag:
                yield f"layers.{i}.skip", layer.skip
    for k in sorted(params.readout):
        yield f"readout.{k}", params.readout[k]
    yield "x0.re", params.x0_re
    yield "x0.im", params.x0_im


def flatten_params(params):
    """Name -> array view of every parameter (x0 included, gradient-free)."""
    return dict(_param_entries(params))


def init_model(config, seed):
    """Selector and net weights uniform +-1/sqrt(fan_in), score bank standard
    normal, biases zero, embedding uniform +-1, x0 = 0."""
    rng = np.random.default_rng(seed)

    def unif(shape, fan):
        return rng.uniform(-1.0, 1.0, shape) / np.sqrt(fan)

    V, D, N, K, H = (config.vocab, config.dim, config.state, config.bank,
                     config.hidden)
    embed = rng.uniform(-1.0, 1.0, (V, D))
    layers = []
    for i in range(config.depth):
        gen = tg.PdGeneratorParams(
            S=unif((K, D), D), bank=rng.standard_normal((K, N, N)),
            wm_i=unif((H, D), D), bm_i=np.zeros(H),
            wm_o=unif((N, H), H), bm_o=np.zeros(H),
            wp_i=unif((H, D), D), bp_i=np.zeros(H),
            wp_o=unif((N, H), H), bp_o=np.zeros(H),
            tau=config.tau, mag_cap_eps=config.mag_cap_eps,
        )
        layer = LayerParams(
            gen=gen,
            b_in_re=unif((N, D), 2 * D),
            b_in_im=unif((N, D), 2 * D),
            gain=np.ones(D) if config.norm else None,
        )
        if i < config.depth - 1:
            layer.out_w = unif((D, 2 * N), 2 * N)
            layer.out_b = np.zeros(D)
            if config.skip_diag:
                layer.skip = np.zeros(D)
        layers.append(layer)
    C = config.n_classes
    if config.readout == "linear":
        readout = {"w": unif((C, 2 * N), 2 * N), "b": np.zeros(C)}
    else:
        Hr = config.readout_hidden
        readout = {"w1": unif((Hr, 2 * N), 2 * N), "b1": np.zeros(Hr),
                   "w2": unif((C, Hr), Hr), "b2": np.zeros(C)}
    return ModelParams(config=config, embed=embed, layers=layers, readout=readout,
                       x0_re=np.zeros(N), x0_im=np.zeros(N))


# --- forward ------------------------------------------------------------------


@dataclass
class LayerTape:
    e_in: np.ndarray = None
    r: Optional[np.ndarray] = None
    h: np.ndarray = None
    token_keyed: bool = False
    ids: Optional[np.ndarray] = None
    inv: Optional[np.ndarray] = None
    cache: tg.GeneratorCache = None       # net-side cache (per id when deduped)
    p_cache: Optional[tg.GeneratorCache] = None  # per-position routing cache
    valid_idx: Optional[np.ndarray] = None  # flat positions inside each length
    rows: Optional[np.ndarray] = None     # (B, L, N) one-hot column indices
    vals: np.ndarray = None               # (B, L, N) diagonal entries, per position
    p_soft: Optional[np.ndarray] = None   # dense routing matrices, per cache row
    b: np.ndarray = None                  # (B, L, N) input injections
    states: np.ndarray = None
    x0b: np.ndarray = None
    z: Optional[np.ndarray] = None        # (Re||Im) states, non-final layers


@dataclass
class ForwardTape:
    params: ModelParams
    version: int
    tokens: np.ndarray
    lengths: np.ndarray
    variant: str
    per_position: bool
    layers: list = field(default_factory=list)
    zf: np.ndarray = None
    q: Optional[np.ndarray] = None
    final_idx: Optional[np.ndarray] = None


def _input_map(layer, hf):
    bc = layer.b_in_re + 1j * layer.b_in_im
    return hf @ bc.T


def _soft_p_at(lt, shape, t):
    """Dense routing matrices of step t, (B, N, N)."""
    B, L = shape
    if lt.inv is not None:
        return lt.p_soft[lt.inv.reshape(B, L)[:, t]]
    n = lt.p_soft.shape[-1]
    return lt.p_soft.reshape(B, L, n, n)[:, t]


def _layer_apply(cfg, layer, h, tokens_flat, variant, rng, x0b, valid_idx=None):
    B, L, D = h.shape
    N = cfg.state
    gen = layer.gen
    hf = h.reshape(-1, D)
    with_phase = cfg.mode != "real_diagonal"
    lt = LayerTape(h=h, x0b=x0b, token_keyed=tokens_flat is not None)
    if lt.token_keyed:
        lt.ids, first, lt.inv = np.unique(tokens_flat, return_index=True,
                                          return_inverse=True)
        u_eval = hf[first]
    else:
        u_eval = hf
    lt.b = _input_map(layer, hf).reshape(B, L, N)

    def expand(a):
        if lt.inv is None:
            return a.reshape((B, L) + a.shape[1:])
        return a[lt.inv].reshape((B, L) + a.shape[1:])

    if cfg.mode != "pd":
        _, _, vals, lt.cache = tg.generate_stack(gen, u_eval, variant="hard",
                                                 with_phase=with_phase, with_p=False)
        lt.vals = expand(vals)
        lt.states = scan.scan_states_diag(lt.vals, lt.b, x0b)
        return lt

    if variant == "soft":
        _, lt.p_soft, vals, lt.cache = tg.generate_stack(gen, u_eval, variant="soft")
        lt.vals = expand(vals)
        # stream the dense recurrence one step at a time; never materializes
        # the (B, L, N, N) stack, which matters at inference scale
        states = np.empty((B, L, N), dtype=np.complex128)
        x = np.array(x0b, dtype=np.complex128)
        for t in range(L):
            x = np.einsum("bij,bj->bi", _soft_p_at(lt, (B, L), t),
                          lt.vals[:, t] * x) + lt.b[:, t]
            states[:, t] = x
        lt.states = states
        return lt

    if variant == "stochastic" and lt.token_keyed:
        # nets once per distinct token, fresh routing noise per position;
        # noise is only drawn inside each sequence's length, so the cache
        # holds the noisy logits at valid positions and padding routes as
        # the identity (those columns are never read and carry no gradient)
        s_id, mu_id = tg._mix_scores(gen, u_eval)
        _, _, vals, lt.cache = tg.generate_stack(gen, u_eval, variant="hard",
                                                 with_p=False)
        inv_v = lt.inv if valid_idx is None else lt.inv[valid_idx]
        noisy = mu_id[inv_v]
        # Gumbel(0,1) == -log Exp(1); the exponential sampler is much faster
        noise = rng.standard_exponential(size=noisy.shape)
        np.log(noise, out=noise)
        noisy -= noise
        rows_v = np.argmax(noisy, axis=1)
        lt.p_cache = tg.GeneratorCache(
            params=gen, u=hf if valid_idx is None else hf[valid_idx],
            s=s_id[inv_v], mu=noisy, indices=rows_v,
            z_mag=None, mag_raw=None, uncapped=None, z_phase=None, phase=None,
            gumbel=None)
        lt.valid_idx = valid_idx
        if valid_idx is None:
            rows = rows_v
        else:
            rows = np.tile(np.arange(N, dtype=rows_v.dtype), (hf.shape[0], 1))
            rows[valid_idx] = rows_v
        lt.rows = rows.reshape(B, L, N)
        lt.vals = expand(vals)
    else:
        rows, _, vals, lt.cache = tg.generate_stack(gen, u_eval, variant=variant,
                                                    rng=rng)
        lt.rows = expand(rows)
        lt.vals = expand(vals)
    lt.states = scan.scan_states(lt.rows, lt.vals, lt.b, x0b)
    return lt


def forward_batch(params, tokens, lengths=None, p_variant="hard", rng=None,
                  per_position=False, want_tape=True, dedup=True):
    """Run a (B, L) batch of token sequences through the model.

    Returns (logits, tape); logits are (B, C) at each sequence's final
    position, or (B, L, C) when per_position is set. Sequences shorter than L
    are declared via lengths; trailing positions are computed but ignored.
    """
    cfg = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ValueError(f"tokens must be (batch, length >= 1), got {tokens.shape}")
    tokens = tokens.astype(np.int64, copy=False)
    B, L = tokens.shape
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token id outside [0, vocab)")
    if lengths is None:
        lengths = np.full(B, L, dtype=np.int64)
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > L:
            raise ValueError("lengths must be (B,) within [1, L]")
    if p_variant not in ("hard", "stochastic", "soft"):
        raise ValueError(f"unknown p_variant {p_variant!r}")
    if p_variant == "stochastic" and rng is None:
        raise ValueError("stochastic routing needs an rng")

    N = cfg.state
    x0b = np.broadcast_to(params.x0_re + 1j * params.x0_im, (B, N))
    e = params.embed[tokens]
    tokens_flat = tokens.reshape(-1)
    if lengths.min() == L:
        valid_idx = None
    else:
        valid_idx = np.flatnonzero((np.arange(L) < lengths[:, None]).ravel())
    tapes = []
    for li, layer in enumerate(params.layers):
        e_in = e
        if cfg.norm:
            r = np.sqrt(np.mean(e_in * e_in, axis=-1, keepdims=True) + RMS_EPS)
            h = e_in / r * layer.gain
        else:
            r = None
            h = e_in
        token_keyed = dedup and li == 0 and not cfg.norm
        lt = _layer_apply(cfg, layer, h, tokens_flat if token_keyed else None,
                          p_variant, rng, x0b, valid_idx)
        lt.e_in = e_in
        lt.r = r
        tapes.append(lt)
        if li < cfg.depth - 1:
            z = np.concatenate([lt.states.real, lt.states.imag], axis=-1)
            y = z @ layer.out_w.T + layer.out_b
            if cfg.skip_diag:
                y = y + layer.skip * h
            lt.z = z
            e = e_in + y if cfg.residual else y

    last = tapes[-1].states
    if per_position:
        zf = np.concatenate([last.real, last.imag], axis=-1)
        final_idx = None
    else:
        final_idx = lengths - 1
        sel = last[np.arange(B), final_idx]
        zf = np.concatenate([sel.real, sel.imag], axis=-1)
    ro = params.readout
    if cfg.readout == "linear":
        logits = zf @ ro["w"].T + ro["b"]
        q = None
    else:
        q = zf @ ro["w1"].T + ro["b1"]
        logits = tg.gelu(q) @ ro["w2"].T + ro["b2"]
    if not want_tape:
        return logits, None
    tape = ForwardTape(params=params, version=params._version, tokens=tokens,
                       lengths=lengths, variant=p_variant,
                       per_position=per_position, layers=tapes, zf=zf, q=q,
                       final_idx=final_idx)
    return logits, tape


def model_forward(params, tokens, **kw):
    """Single-sequence convenience wrapper; logits lose the batch axis."""
    logits, tape = forward_batch(params, np.asarray(tokens)[None, :], **kw)
    return logits[0], tape


# --- backward -----------------------------------------------------------------


def _group_sum(keys, x, m):
    """Sum rows of x (T, ...) into m buckets; exact up to addition order."""
    flat = x.reshape(len(keys), -1)
    k = flat.shape[1]
    idx = (keys[:, None] * k + np.arange(k)).ravel()
    if np.iscomplexobj(flat):
        re = np.bincount(idx, weights=flat.real.ravel(), minlength=m * k)
        im = np.bincount(idx, weights=flat.imag.ravel(), minlength=m * k)
        out = re + 1j * im
    else:
        out = np.bincount(idx, weights=flat.ravel(), minlength=m * k)
    return out.reshape((m,) + x.shape[1:])


def _grouped_outer_real(inv, n_groups, g, w):
    """Per-group sums of Re(g_t outer w_t), one complex matmul per group.

    Re(g)^T Re(w) - Im(g)^T Im(w) = Re(g^T w); the complex product keeps the
    operands contiguous, which strided .real/.imag views would not.
    """
    order = np.argsort(inv, kind="stable")
    gs, ws = g[order], w[order]
    bounds = np.searchsorted(inv[order], np.arange(n_groups + 1))
    out = np.empty((n_groups, g.shape[1], w.shape[1]))
    for v in range(n_groups):
        s0, s1 = bounds[v], bounds[v + 1]
        out[v] = (gs[s0:s1].T @ ws[s0:s1]).real
    return out


def _outer_real_stack(g, w):
    # contiguous copies: einsum on strided component views is ~25% slower
    gr, gi = np.ascontiguousarray(g.real), np.ascontiguousarray(g.imag)
    wr, wi = np.ascontiguousarray(w.real), np.ascontiguousarray(w.imag)
    out = np.einsum("ti,tj->tij", gr, wr)
    out -= np.einsum("ti,tj->tij", gi, wi)
    return out


def _layer_backward(cfg, layer, lt, dstates, g_h_extra, grads, li):
    """Backprop one layer; returns the gradient w.r.t. its input stream."""
    B, L, N = lt.states.shape
    D = lt.h.shape[-1]
    T = B * L

    # total state gradients through the reverse recurrence
    if cfg.mode != "pd":
        idrows = np.broadcast_to(np.arange(N), (B, L - 1, N))
        g_tot = scan.backward_stacked(dstates, idrows, lt.vals[:, 1:])
    elif lt.p_soft is not None:
        g_tot = np.empty_like(dstates)
        g_tot[:, L - 1] = dstates[:, L - 1]
        for t in range(L - 2, -1, -1):
            p_next = _soft_p_at(lt, (B, L), t + 1)
            carried = lt.vals[:, t + 1] * np.einsum("bij,bi->bj", p_next,
                                                    g_tot[:, t + 1])
            g_tot[:, t] = dstates[:, t] + carried
    else:
        g_tot = scan.backward_stacked(dstates, lt.rows[:, 1:], lt.vals[:, 1:])

    prev = np.concatenate([lt.x0b[:, None], lt.states[:, :-1]], axis=1)
    gf = g_tot.reshape(T, N)
    prevf = prev.reshape(T, N)
    valsf = lt.vals.reshape(T, N)
    per_id_u = None
    per_pos_u = np.zeros((T, D))
    pfx = f"layers.{li}.gen."

    if cfg.mode == "pd":
        w = valsf * prevf
        if lt.p_soft is not None:
            # dense transitions: P enters linearly, vals through P^T g
            if lt.inv is not None:
                pmat = lt.p_soft[lt.inv]
            else:
                pmat = lt.p_soft
            grad_vals = np.einsum("tij,ti->tj", pmat, gf) * prevf
            grad_p_pos = _outer_real_stack(gf, w)
            if lt.inv is not None:
                pg = tg.backward_p_stack(lt.cache,
                                         _group_sum(lt.inv, grad_p_pos, len(lt.ids)))
                per_id_u = pg.u
            else:
                pg = tg.backward_p_stack(lt.cache, grad_p_pos)
                per_pos_u += pg.u
        else:
            grad_vals = np.take_along_axis(g_tot, lt.rows, axis=-1).reshape(T, N) * prevf
            if lt.p_cache is not None:
                # stochastic with shared nets: routing grads stay per position
                if lt.valid_idx is None:
                    pg = tg.backward_p_stack(lt.p_cache, _outer_real_stack(gf, w))
                    per_pos_u += pg.u
                else:
                    idx = lt.valid_idx
                    pg = tg.backward_p_stack(
                        lt.p_cache, _outer_real_stack(gf[idx], w[idx]))
                    per_pos_u[idx] += pg.u
            elif lt.inv is not None:
                grad_p_id = _grouped_outer_real(lt.inv, len(lt.ids), gf, w)
                pg = tg.backward_p_stack(lt.cache, grad_p_id)
                per_id_u = pg.u
            else:
                pg = tg.backward_p_stack(lt.cache, _outer_real_stack(gf, w))
                per_pos_u += pg.u
        grads[pfx + "S"] += pg.S
        grads[pfx + "bank"] += pg.bank
    else:
        grad_vals = gf * prevf

    if lt.inv is not None:
        dg = tg.backward_d_stack(lt.cache, _group_sum(lt.inv, grad_vals, len(lt.ids)))
        per_id_u = dg.u if per_id_u is None else per_id_u + dg.u
    else:
        dg = tg.backward_d_stack(lt.cache, grad_vals)
        per_pos_u += dg.u
    for f in _gen_fields(cfg.mode):
        if f in ("S", "bank"):
            continue
        grads[pfx + f] += getattr(dg, f)

    # input injection path
    hf = lt.h.reshape(T, D)
    gth = gf.T @ hf
    grads[f"layers.{li}.b_in.re"] += gth.real
    grads[f"layers.{li}.b_in.im"] += -gth.imag
    bc = layer.b_in_re + 1j * layer.b_in_im
    g_h = (gf @ bc).real + per_pos_u
    g_h = g_h.reshape(B, L, D)
    if isinstance(g_h_extra, np.ndarray):
        g_h = g_h + g_h_extra

    if lt.token_keyed:
        if per_id_u is not None:
            grads["embed"][lt.ids] += per_id_u
        return g_h
    if cfg.norm:
        inv_r = 1.0 / lt.r
        grads[f"layers.{li}.gain"] += (g_h * (lt.e_in * inv_r)).sum((0, 1))
        gg = g_h * layer.gain
        dot = (gg * lt.e_in).sum(-1, keepdims=True)
        return gg * inv_r - lt.e_in * (inv_r ** 3) * (dot / D)
    return g_h


def model_backward(tape, grad_logits):
    """Gradients of a scalar loss given dL/dlogits; returns name -> array."""
    params = tape.params
    if tape.version != params._version:
        raise ValueError("stale tape: parameters changed since the forward pass")
    cfg = params.config
    grads = {name: np.zeros_like(arr) for name, arr in _param_entries(params)
             if not name.startswith("x0.")}
    B, L = tape.tokens.shape
    N = cfg.state
    D = cfg.dim

    gl = np.asarray(grad_logits, dtype=np.float64)
    zf = tape.zf
    gl2 = gl.reshape(-1, gl.shape[-1])
    zf2 = zf.reshape(-1, zf.shape[-1])
    ro = params.readout
    if cfg.readout == "linear":
        grads["readout.w"] += gl2.T @ zf2
        grads["readout.b"] += gl2.sum(0)
        g_zf = gl @ ro["w"]
    else:
        a = tg.gelu(tape.q)
        grads["readout.w2"] += gl2.T @ a.reshape(-1, a.shape[-1])
        grads["readout.b2"] += gl2.sum(0)
        g_q = (gl @ ro["w2"]) * tg.gelu_prime(tape.q)
        gq2 = g_q.reshape(-1, g_q.shape[-1])
        grads["readout.w1"] += gq2.T @ zf2
        grads["readout.b1"] += gq2.sum(0)
        g_zf = g_q @ ro["w1"]

    if tape.per_position:
        direct = g_zf[..., :N] - 1j * g_zf[..., N:]
    else:
        direct = np.zeros((B, L, N), dtype=np.complex128)
        direct[np.arange(B), tape.final_idx] = g_zf[:, :N] - 1j * g_zf[:, N:]

    g_up = None
    for li in reversed(range(cfg.depth)):
        lt = tape.layers[li]
        layer = params.layers[li]
        if li == cfg.depth - 1:
            dstates = direct
            g_h_extra = 0.0
            g_res = None
        else:
            g_y = g_up
            grads[f"layers.{li}.out.w"] += np.einsum("btd,btk->dk", g_y, lt.z)
            grads[f"layers.{li}.out.b"] += g_y.sum((0, 1))
            g_z = g_y @ layer.out_w
            dstates = g_z[..., :N] - 1j * g_z[..., N:]
            if cfg.skip_diag:
                grads[f"layers.{li}.skip"] += (g_y * lt.h).sum((0, 1))
                g_h_extra = g_y * layer.skip
            else:
                g_h_extra = 0.0
            g_res = g_up if cfg.residual else None
        g_e = _layer_backward(cfg, layer, lt, dstates, g_h_extra, grads, li)
        if g_res is not None:
            g_e = g_e + g_res
        g_up = g_e

    grads["embed"] += _group_sum(tape.tokens.reshape(-1), g_up.reshape(-1, D),
                                 cfg.vocab)
    return grads


# --- losses -------------------------------------------------------------------


def _log_softmax(logits):
    m = logits.max(-1, keepdims=True)
    shifted = logits - m
    with np.errstate(under="ignore"):
        ex = np.exp(shifted)
    z = ex.sum(-1, keepdims=True)
    return shifted - np.log(z), ex / z


def cross_entropy_final(logits, labels):
    """Mean cross entropy over a (B, C) batch; returns (loss, dL/dlogits)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    bsz = logits.shape[0]
    logp, p = _log_softmax(logits)
    loss = -logp[np.arange(bsz), labels].mean()
    grad = p.copy()
    grad[np.arange(bsz), labels] -= 1.0
    return loss, grad / bsz


def cross_entropy_positions(logits, labels, lengths=None):
    """Mean cross entropy over all valid positions of (B, L, C) logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, L, _ = logits.shape
    if lengths is None:
        mask = np.ones((B, L), dtype=bool)
    else:
        mask = np.arange(L) < np.asarray(lengths)[:, None]
    n = int(mask.sum())
    logp, p = _log_softmax(logits)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n
    grad = p.copy()
    np.put_along_axis(grad, labels[..., None],
                      np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0,
                      axis=-1)
    grad *= mask[..., None]
    return loss, grad / n


# --- checkpoints ----------------------------------------------------------------


_MAGIC = b"PDSSM"
_CKPT_VERSION = 1


def save_checkpoint(path, params):
    """Binary dump of every parameter array, float64 little-endian."""
    entries = list(_param_entries(params))
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BI", 0, a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
            f.write(a.tobytes())


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def load_checkpoint(path, config):
    """Rebuild ModelParams from a checkpoint, validating against config."""
    params = init_model(config, seed=0)
    expected = flatten_params(params)
    seen = set()
    with open(path, "rb") as f:
        if _read_exact(f, len(_MAGIC)) != _MAGIC:
            raise ValueError("not a model checkpoint (bad magic)")
        version, count = struct.unpack("<II", _read_exact(f, 8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, nlen).decode("utf-8")
            dtype_code, rank = struct.unpack("<BI", _read_exact(f, 5))
            if dtype_code != 0:
                raise ValueError(f"{name}: unknown dtype code {dtype_code}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
            data = np.frombuffer(_read_exact(f, 8 * int(np.prod(shape, dtype=np.int64))),
                                 dtype="<f8").reshape(shape)
            if name not in expected:
                raise ValueError(f"checkpoint entry {name!r} not in this config")
            if expected[name].shape != data.shape:
                raise ValueError(f"{name}: shape {data.shape} != expected "
                                 f"{expected[name].shape}")
            expected[name][...] = data
            seen.add(name)
        if f.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    missing = set(expected) - seen
    if missing:
        raise ValueError(f"checkpoint is missing {sorted(missing)}")
    params.bump()
    return params
