"""Finite-state automata: task builders, simulation, and the exact compiler.

State-tracking tasks supervise the automaton state reached after consuming a
word, so labels are state indices. compile_to_ssm turns any automaton into
model weights that reproduce its run exactly: state vectors stay exact basis
vectors because the routing is an argmax over well-separated scores and the
diagonal saturates to exactly 1.

Group word problems represent elements as permutations; the automaton state
set is the group itself (BFS discovery order from the identity) and symbols
act by right multiplication.

Layout notes for the reconstructed tasks:
  * even pairs: state 0 = empty word, state 1 + 2*first + last otherwise;
    a word is accepted when it is empty or first == last (states 0, 1, 4);
  * mod arith: state = accumulator * 3 + pending operator, symbols 0-4 are
    digits, 5/6/7 set the pending operator to +/-/x, start at (0, +); a digit
    folds into the accumulator with the pending operator kept.
"""

import re
from dataclasses import dataclass

import numpy as np

from . import model as md


@dataclass(frozen=True)
class Fsa:
    num_states: int
    num_symbols: int
    delta: np.ndarray  # (Q, sigma) next-state table
    q_init: int

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.int64)
        if delta.shape != (self.num_states, self.num_symbols):
            raise ValueError(f"delta shape {delta.shape} != "
                             f"({self.num_states}, {self.num_symbols})")
        if delta.size and (delta.min() < 0 or delta.max() >= self.num_states):
            raise ValueError("delta entries must be state indices")
        if not 0 <= self.q_init < self.num_states:
            raise ValueError(f"q_init {self.q_init} out of range")
        delta = delta.copy()
        delta.flags.writeable = False
        object.__setattr__(self, "delta", delta)


def fsa_run(fsa, word):
    """State trajectory [q_init, q_1, ..., q_L] for one word."""
    word = np.asarray(word, dtype=np.int64).reshape(-1)
    if word.size and (word.min() < 0 or word.max() >= fsa.num_symbols):
        raise ValueError("symbol out of range")
    traj = np.empty(len(word) + 1, dtype=np.int64)
    traj[0] = fsa.q_init
    q = fsa.q_init
    for t, s in enumerate(word):
        q = fsa.delta[q, s]
        traj[t + 1] = q
    return traj


def fsa_run_batch(fsa, tokens, lengths=None):
    """Vectorized trajectories, (B, L+1); states freeze once a word ends."""
    tokens = np.asarray(tokens, dtype=np.int64)
    B, L = tokens.shape
    if tokens.size and (tokens.min() < 0 or tokens.max() >= fsa.num_symbols):
        raise ValueError("symbol out of range")
    traj = np.empty((B, L + 1), dtype=np.int64)
    traj[:, 0] = fsa.q_init
    q = traj[:, 0].copy()
    for t in range(L):
        nxt = fsa.delta[q, tokens[:, t]]
        if lengths is not None:
            nxt = np.where(t < lengths, nxt, q)
        q = nxt
        traj[:, t + 1] = q
    return traj


# --- task automata --------------------------------------------------------------


def make_parity():
    """Two states tracking the parity of ones; symbol 1 flips, 0 keeps."""
    delta = np.array([[0, 1], [1, 0]])
    return Fsa(num_states=2, num_symbols=2, delta=delta, q_init=0)


def make_even_pairs():
    delta = np.zeros((5, 2), dtype=np.int64)
    delta[0] = [1, 4]  # first symbol fixes both endpoints
    for first in (0, 1):
        for last in (0, 1):
            q = 1 + 2 * first + last
            delta[q] = [1 + 2 * first, 1 + 2 * first + 1]
    return Fsa(num_states=5, num_symbols=2, delta=delta, q_init=0)


def make_cycle_nav():
    """Position on a 5-cycle; symbols are +1, -1, stay."""
    q = np.arange(5)
    delta = np.stack([(q + 1) % 5, (q - 1) % 5, q], axis=1)
    return Fsa(num_states=5, num_symbols=3, delta=delta, q_init=0)


def make_mod_arith():
    delta = np.zeros((15, 8), dtype=np.int64)
    for acc in range(5):
        for op in range(3):
            q = acc * 3 + op
            for d in range(5):
                nxt = (acc + d, acc - d, acc * d)[op] % 5
                delta[q, d] = nxt * 3 + op
            for op_new in range(3):
                delta[q, 5 + op_new] = acc * 3 + op_new
    return Fsa(num_states=15, num_symbols=8, delta=delta, q_init=0)


# --- permutation groups ----------------------------------------------------------


@dataclass(frozen=True)
class Permutation:
    image: tuple

    def __post_init__(self):
        object.__setattr__(self, "image", tuple(int(i) for i in self.image))
        if sorted(self.image) != list(range(len(self.image))):
            raise ValueError(f"not a bijection: {self.image}")

    def __mul__(self, other):
        # function composition, other applied first
        return Permutation(tuple(self.image[j] for j in other.image))

    def inverse(self):
        inv = [0] * len(self.image)
        for i, j in enumerate(self.image):
            inv[j] = i
        return Permutation(tuple(inv))

    @classmethod
    def identity(cls, n):
        return cls(tuple(range(n)))

    @classmethod
    def from_cycle(cls, n, points):
        image = list(range(n))
        for a, b in zip(points, points[1:] + points[:1]):
            image[a] = b
        return cls(tuple(image))


_GROUP_ORDERS = {"A5": 60, "S5": 120, "Z2xZ30": 60}


def _canonical_generators(group):
    m = re.fullmatch(r"Z(\d+)", group)
    if m:
        n = int(m.group(1))
        if n < 2:
            raise ValueError("cyclic group needs order >= 2")
        return [Permutation.from_cycle(n, list(range(n)))], n
    m = re.fullmatch(r"D(\d+)", group)
    if m:
        n = int(m.group(1))
        if n < 3:
            raise ValueError("dihedral group needs n >= 3")
        rot = Permutation.from_cycle(n, list(range(n)))
        refl = Permutation(tuple((n - i) % n for i in range(n)))
        return [rot, refl], 2 * n
    if group == "Z2xZ30":
        flip = Permutation.from_cycle(32, [0, 1])
        cyc = Permutation.from_cycle(32, list(range(2, 32)))
        return [flip, cyc], 60
    if group == "A5":
        return [Permutation.from_cycle(5, [0, 1, 2, 3, 4]),
                Permutation.from_cycle(5, [0, 1, 2])], 60
    if group == "S5":
        return [Permutation.from_cycle(5, [0, 1]),
                Permutation.from_cycle(5, [0, 1, 2, 3, 4])], 120
    raise ValueError(f"unknown group {group!r}")


def group_generators(group, extra_generators=None, seed=0):
    """Canonical generators, then uniform-ish extras (64-step random words)."""
    canon, _ = _canonical_generators(group)
    if extra_generators is None:
        extra_generators = len(canon)
    if extra_generators < len(canon):
        raise ValueError(f"need at least {len(canon)} generators for {group}")
    gens = list(canon)
    rng = np.random.default_rng(seed)
    for _ in range(extra_generators - len(canon)):
        elem = Permutation.identity(len(canon[0].image))
        for sym in rng.integers(0, len(canon), size=64):
            elem = elem * canon[sym]
        gens.append(elem)
    return gens


def make_group_fsa(group, extra_generators=None, seed=0):
    """Word-problem automaton: states are group elements, q_init the identity."""
    gens = group_generators(group, extra_generators, seed)
    _, order = _canonical_generators(group)
    index = {Permutation.identity(len(gens[0].image)).image: 0}
    elements = [Permutation.identity(len(gens[0].image))]
    frontier = [elements[0]]
    while frontier:
        elem = frontier.pop()
        for g in gens:
            nxt = elem * g
            if nxt.image not in index:
                index[nxt.image] = len(elements)
                elements.append(nxt)
                frontier.append(nxt)
    if len(elements) != order:
        raise ValueError(f"{group}: generated {len(elements)} elements, "
                         f"expected {order}")
    delta = np.empty((order, len(gens)), dtype=np.int64)
    for q, elem in enumerate(elements):
        for sym, g in enumerate(gens):
            delta[q, sym] = index[(elem * g).image]
    return Fsa(num_states=order, num_symbols=len(gens), delta=delta, q_init=0)


# --- sampling ---------------------------------------------------------------------


def sample_batch(fsa, len_lo, len_hi, batch, seed):
    """(tokens, final-state labels, lengths); padded positions hold symbol 0.

    Each batch item draws from its own rng seeded by (seed, item) so the batch
    is reproducible and can be generated in parallel.
    """
    if not 1 <= len_lo <= len_hi:
        raise ValueError(f"need 1 <= len_lo <= len_hi, got [{len_lo}, {len_hi}]")
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    tokens = np.zeros((batch, len_hi), dtype=np.int64)
    lengths = np.empty(batch, dtype=np.int64)
    for i in range(batch):
        rng = np.random.default_rng(base + (i,))
        ln = int(rng.integers(len_lo, len_hi + 1))
        lengths[i] = ln
        tokens[i, :ln] = rng.integers(0, fsa.num_symbols, size=ln)
    labels = fsa_run_batch(fsa, tokens, lengths)[np.arange(batch), lengths]
    return tokens, labels, lengths


# --- exact compiler --------------------------------------------------------------


def compile_to_ssm(fsa):
    """Model weights that replay the automaton exactly.

    One-hot symbol embeddings scaled by 8 and selector S = 8 I make the bank
    mixture numerically one-hot on the current symbol (wrong-symbol mass is
    e^-64, far below the 10-vs-0 score gap, so the column argmax is exact).
    The diagonal nets are pinned at +-800 preactivation, where the sigmoid
    saturates to exactly 1 (magnitude) and exactly 0 (phase) in float64, so
    transitions are pure routing and states remain exact basis vectors.
    """
    Q, S = fsa.num_states, fsa.num_symbols
    cfg = md.ModelConfig(vocab=S, dim=S, state=Q, bank=S, hidden=1,
                         n_classes=Q, depth=1, mode="pd", readout="linear")
    params = md.init_model(cfg, seed=0)
    params.embed[:] = 8.0 * np.eye(S)
    layer = params.layers[0]
    layer.gen.S[:] = 8.0 * np.eye(S)
    layer.gen.bank[:] = 0.0
    for sym in range(S):
        layer.gen.bank[sym, fsa.delta[:, sym], np.arange(Q)] = 10.0
    for w in (layer.gen.wm_i, layer.gen.bm_i, layer.gen.wp_i, layer.gen.bp_i):
        w[:] = 0.0
    layer.gen.bm_o[:] = 1.0
    layer.gen.wm_o[:] = 800.0
    layer.gen.bp_o[:] = 1.0
    layer.gen.wp_o[:] = -800.0
    layer.b_in_re[:] = 0.0
    layer.b_in_im[:] = 0.0
    params.x0_re[:] = 0.0
    params.x0_re[fsa.q_init] = 1.0
    params.x0_im[:] = 0.0
    params.readout["w"][:] = np.concatenate([np.eye(Q), np.zeros((Q, Q))], axis=1)
    params.readout["b"][:] = 0.0
    params.bump()
    return params


# --- text format ------------------------------------------------------------------


def format_fsa(fsa):
    lines = [f"states {fsa.num_states} alphabet {fsa.num_symbols} init {fsa.q_init}"]
    for q in range(fsa.num_states):
        lines.append(" ".join(str(int(x)) for x in fsa.delta[q]))
    return "\n".join(lines) + "\n"


def parse_fsa(text):
    lines = text.splitlines()
    if not lines:
        raise ValueError("line 1: empty automaton file")
    head = lines[0].split()
    if (len(head) != 6 or head[0] != "states" or head[2] != "alphabet"
            or head[4] != "init"):
        raise ValueError("line 1: expected header 'states Q alphabet S init q0'")
    try:
        n_states, n_symbols, q_init = int(head[1]), int(head[3]), int(head[5])
    except ValueError:
        raise ValueError("line 1: header fields must be integers") from None
    delta = np.zeros((n_states, n_symbols), dtype=np.int64)
    for q in range(n_states):
        lineno = q + 2
        if q + 1 >= len(lines) or not lines[q + 1].strip():
            raise ValueError(f"line {lineno}: missing transition row "
                             f"(need {n_states})")
        parts = lines[q + 1].split()
        if len(parts) != n_symbols:
            raise ValueError(f"line {lineno}: expected {n_symbols} entries, "
                             f"got {len(parts)}")
        for sym, p in enumerate(parts):
            try:
                v = int(p)
            except ValueError:
                raise ValueError(f"line {lineno}: {p!r} is not an integer") from None
            if not 0 <= v < n_states:
                raise ValueError(f"line {lineno}: state {v} out of range")
            delta[q, sym] = v
    for extra, line in enumerate(lines[n_states + 1:], start=n_states + 2):
        if line.strip():
            raise ValueError(f"line {extra}: unexpected content after "
                             f"{n_states} transition rows")
    try:
        return Fsa(num_states=n_states, num_symbols=n_symbols, delta=delta,
                   q_init=q_init)
    except ValueError as e:
        raise ValueError(f"line 1: {e}") from None


def save_fsa(path, fsa):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_fsa(fsa))


def load_fsa(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_fsa(f.read())
