#!/usr/bin/env python3
"""Compile automata to SSM weights and verify they replay exactly.

For each named machine this builds the weights, runs random words through the
model with hard routing, and compares the per-position argmax readout with
the reference automaton trajectory. Any mismatch is reported with the word
that produced it.

Example:
    python3 scripts/compile_check.py --words 200 --max-len 500
    python3 scripts/compile_check.py --machines parity A5 D30
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from pdssm import fsa_tasks as ft
from pdssm import model as md

DEFAULT = ["parity", "Z5", "D4", "Z2xZ30", "D30", "A5"]


def machine(name):
    if name == "parity":
        return ft.make_parity()
    if name == "cycle_nav":
        return ft.make_cycle_nav()
    return ft.make_group_fsa(name)


def check(name, fsa, words, max_len, seed):
    params = ft.compile_to_ssm(fsa)
    rng = np.random.default_rng(seed)
    bad = 0
    for start in range(0, words, 50):
        k = min(50, words - start)
        lens = rng.integers(1, max_len + 1, size=k)
        toks = np.zeros((k, int(lens.max())), dtype=np.int64)
        for j, ln in enumerate(lens):
            toks[j, :ln] = rng.integers(0, fsa.num_symbols, size=ln)
        logits, _ = md.forward_batch(params, toks, lengths=lens,
                                     p_variant="hard", per_position=True,
                                     want_tape=False)
        pred = np.argmax(logits, axis=-1)
        truth = ft.fsa_run_batch(fsa, toks, lens)[:, 1:]
        mask = np.arange(toks.shape[1])[None, :] < lens[:, None]
        wrong = np.where(np.any((pred != truth) & mask, axis=1))[0]
        for j in wrong:
            bad += 1
            if bad <= 3:
                print(f"  mismatch on word {toks[j, :lens[j]].tolist()}")
    status = "exact" if bad == 0 else f"{bad} mismatched words"
    print(f"{name:<8} states={fsa.num_states:<3} symbols={fsa.num_symbols:<2} "
          f"{words} words up to length {max_len}: {status}")
    return bad == 0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--machines", nargs="+", default=DEFAULT)
    ap.add_argument("--words", type=int, default=200)
    ap.add_argument("--max-len", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ok = all(check(m, machine(m), args.words, args.max_len, args.seed)
             for m in args.machines)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
