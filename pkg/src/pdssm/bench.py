"""Forward-scan runtime comparison across transition structures.

Three structures are timed on the same recurrence x_t = A_t x_{t-1} + b_t:
complex diagonal A_t, one-hot-column times diagonal A_t (the structured path
this package trains with), and an unstructured dense baseline. The diagonal
and structured cells call scan.scan_states_diag and scan.scan_states, the
exact kernels the model layer calls during training; there is no bench-only
fast path to either.

The dense baseline executes the associative pair scan whose element is the
prefix transition matrix together with the accumulated input, so every step
pays a full N x N matrix product. A matvec-only forward (scan.scan_states_dense,
which the tests use as the correctness oracle) would be a different, cheaper
algorithm and is deliberately not what gets timed. Dense transitions are
drawn step by step and column-normalized under an l^p quasi-norm with p < 1,
which contracts long products and keeps states finite; generation therefore
sits inside the timed region for the dense rows. Structured rows use stacks
precomputed outside the timer by default; precomputed_p=False instead runs
the transition generator inside the timer on random weights.

Memory is bounded by streaming: the dense scan never materializes an
N x N x L stack, so its working set is a few N x N panels plus the states.
Cells whose estimated working set exceeds mem_budget are reported as skipped
rows rather than attempted.

Rows carry the median of the measured repetitions and the interquartile
range. Absolute seconds depend on the host; consumers should compare
structures and fit scaling exponents (bench_fit_scaling) rather than read the
numbers as portable constants.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import scan as sc
from . import transition_gen as tg

__all__ = [
    "BenchConfig",
    "BenchRow",
    "bench_scan",
    "bench_fit_scaling",
    "write_bench_csv",
    "CSV_HEADER",
]

_STRUCTURES = ("diagonal", "pd", "dense")
CSV_HEADER = ("structure", "N", "L", "batch", "workers", "median_s", "iqr_s")

# weight shapes for the precomputed_p=False generator cells
_FULL_DIM, _FULL_BANK, _FULL_HIDDEN = 32, 4, 32


@dataclass(frozen=True)
class BenchConfig:
    """Grid and measurement policy for one bench_scan call.

    structure may be a single name or a tuple drawn from {diagonal, pd,
    dense}. workers is advisory and only recorded in the output rows; the
    numpy kernels are single-process either way.
    """

    structure: tuple = _STRUCTURES
    n_grid: tuple = (32, 128, 512, 1024)
    l_grid: tuple = (1024,)
    batch: int = 1
    warmup: int = 1
    reps: int = 5
    seed: int = 0
    workers: int = 1
    precomputed_p: bool = True
    lp_p: float = 0.5
    mem_budget: int = 8 << 30

    def __post_init__(self):
        names = (self.structure,) if isinstance(self.structure, str) else tuple(self.structure)
        for name in names:
            if name not in _STRUCTURES:
                raise ValueError(f"unknown structure {name!r}")
        if not names:
            raise ValueError("structure must name at least one variant")
        object.__setattr__(self, "structure", names)
        for label, grid in (("n_grid", self.n_grid), ("l_grid", self.l_grid)):
            grid = tuple(int(v) for v in grid)
            if not grid or any(v < 1 for v in grid):
                raise ValueError(f"{label} must be non-empty positive integers")
            object.__setattr__(self, label, grid)
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.reps < 3:
            raise ValueError("need at least 3 measured repetitions")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.lp_p > 0.0:
            raise ValueError("lp_p must be positive")
        if self.mem_budget < 1:
            raise ValueError("mem_budget must be positive")


@dataclass
class BenchRow:
    structure: str
    n: int
    l: int
    batch: int
    workers: int
    median_s: float | None
    iqr_s: float | None
    skipped: bool = False
    note: str = ""


# --- dense baseline pieces ---------------------------------------------------


def _normalize_columns_lp(a, p):
    """Scale each column of the trailing 2-d blocks to unit l^p quasi-norm."""
    denom = np.sum(np.abs(a) ** p, axis=-2) ** (1.0 / p)
    return a / denom[..., None, :]


def _dense_step(rng, batch, n, p):
    a = _normalize_columns_lp(rng.standard_normal((batch, n, n)), p)
    b = rng.standard_normal((batch, n))
    return a, b

def _run_dense(seed, batch, l, n, p):
    """Pair scan (prefix matrix, accumulated input) over freshly drawn steps.

    Drawing one step at a time keeps the stream identical for any caller and
    the working set at a few N x N panels. The prefix matrix is what makes
    the combine cubic in N; dropping it would time a different algorithm.
    """
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((batch, n))
    m = np.broadcast_to(np.eye(n), (batch, n, n)).copy()
    c = x0.copy()
    states = np.empty((batch, l, n))
    for t in range(l):
        a, b = _dense_step(rng, batch, n, p)
        m = a @ m
        c = (a @ c[..., None])[..., 0] + b
        states[:, t] = c
    return states


# --- structured inputs -------------------------------------------------------


def _capped_diag(rng, batch, l, n):
    mag = rng.uniform(0.1, 1.0, (batch, l, n))
    phase = rng.uniform(0.0, 2.0 * np.pi, (batch, l, n))
    return mag * np.exp(1j * phase)


def _structured_inputs(rng, batch, l, n):
    vals = _capped_diag(rng, batch, l, n)
    b = rng.standard_normal((batch, l, n)) + 1j * rng.standard_normal((batch, l, n))
    x0 = rng.standard_normal((batch, n)) + 1j * rng.standard_normal((batch, n))
    return vals, b, x0


def _random_generator(rng, n):
    def unif(*shape):
        fan = shape[-1]
        return rng.uniform(-1.0, 1.0, shape) / np.sqrt(fan)

    d, k, h = _FULL_DIM, _FULL_BANK, _FULL_HIDDEN
    return tg.PdGeneratorParams(
        S=unif(k, d), bank=rng.standard_normal((k, n, n)),
        wm_i=unif(h, d), bm_i=np.zeros(h), wm_o=unif(n, h), bm_o=np.zeros(h),
        wp_i=unif(h, d), bp_i=np.zeros(h), wp_o=unif(n, h), bp_o=np.zeros(h))


# --- measurement -------------------------------------------------------------


def _workset_bytes(structure, n, l, batch):
    """Rough peak working set; a guard, not an accountant."""
    if structure == "dense":
        return 8 * batch * n * (4 * n + l + 8)
    m = sc.next_pow2(l + 2)
    per_slot = 16 + 16 if structure == "diagonal" else 8 + 16 + 16
    return 3 * per_slot * batch * m * n


def _cell_runner(cfg, structure, n, l, rng):
    batch = cfg.batch
    if structure == "diagonal":
        vals, b, x0 = _structured_inputs(rng, batch, l, n)
        return lambda: sc.scan_states_diag(vals, b, x0)
    if structure == "pd":
        vals, b, x0 = _structured_inputs(rng, batch, l, n)
        if cfg.precomputed_p:
            rows = rng.integers(0, n, (batch, l, n))
            return lambda: sc.scan_states(rows, vals, b, x0)
        gen = _random_generator(rng, n)
        u = rng.standard_normal((batch * l, _FULL_DIM))

        def run_full():
            r, _, v, _ = tg.generate_stack(gen, u, variant="hard")
            return sc.scan_states(r.reshape(batch, l, n), v.reshape(batch, l, n), b, x0)

        return run_full
    # dense regenerates its stream every repetition, so generation and
    # normalization are inside the timed region (there is nowhere to cache
    # an N x N x L stack)
    seed = (cfg.seed, _STRUCTURES.index(structure), n, l)
    return lambda: _run_dense(seed, batch, l, n, cfg.lp_p)


def _time_cell(cfg, structure, n, l):
    need = _workset_bytes(structure, n, l, cfg.batch)
    if need > cfg.mem_budget:
        note = f"working set ~{need} B exceeds memory budget {cfg.mem_budget} B"
        return BenchRow(structure=structure, n=n, l=l, batch=cfg.batch,
                        workers=cfg.workers, median_s=None, iqr_s=None,
                        skipped=True, note=note)
    rng = np.random.default_rng((cfg.seed, _STRUCTURES.index(structure), n, l))
    run = _cell_runner(cfg, structure, n, l, rng)
    for _ in range(cfg.warmup):
        run()
    times = []
    out = None
    for _ in range(cfg.reps):
        t0 = time.perf_counter()
        out = run()
        times.append(time.perf_counter() - t0)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite states in {structure} cell N={n} L={l}")
    q25, q75 = np.percentile(times, [25.0, 75.0])
    return BenchRow(structure=structure, n=n, l=l, batch=cfg.batch,
                    workers=cfg.workers, median_s=float(np.median(times)),
                    iqr_s=float(q75 - q25))


def bench_scan(cfg):
    """Measure every (structure, L, N) grid cell; returns a list of rows."""
    rows = []
    for structure in cfg.structure:
        for l in cfg.l_grid:
            for n in cfg.n_grid:
                rows.append(_time_cell(cfg, structure, n, l))
    return rows


def bench_fit_scaling(table, l=None):
    """Least-squares log-log slope of median runtime vs N per structure.

    Needs at least three usable state sizes per structure at a single
    sequence length; degenerate inputs (too few points, non-positive
    runtimes, a single N value, ambiguous L) raise ValueError.
    """
    usable = [r for r in table if not r.skipped and r.median_s is not None]
    if not usable:
        raise ValueError("no measured rows to fit")
    if l is None:
        ls = sorted({r.l for r in usable})
        if len(ls) != 1:
            raise ValueError(f"table mixes sequence lengths {ls}; pass l=")
        l = ls[0]
    out = {}
    for structure in dict.fromkeys(r.structure for r in usable):
        pts = [(r.n, r.median_s) for r in usable if r.structure == structure and r.l == l]
        if len(pts) < 3:
            raise ValueError(f"need >= 3 state sizes for {structure}, got {len(pts)}")
        ns = np.array([p[0] for p in pts], dtype=np.float64)
        ms = np.array([p[1] for p in pts], dtype=np.float64)
        if np.any(ms <= 0.0):
            raise ValueError(f"non-positive runtimes for {structure}")
        if np.unique(ns).size < 2:
            raise ValueError(f"single state size for {structure}, slope undefined")
        out[structure] = float(np.polyfit(np.log(ns), np.log(ms), 1)[0])
    return out


def write_bench_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.structure, r.n, r.l, r.batch, r.workers,
                        "" if r.median_s is None else repr(float(r.median_s)),
                        "" if r.iqr_s is None else repr(float(r.iqr_s))])
