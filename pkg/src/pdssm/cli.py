"""Command-line front end: train, eval, compile, verify and bench.

Configs are YAML mappings with nested sections (task, model, train, eval,
bench) plus top-level scalars: seed, out, workers, checkpoint. Unknown keys
anywhere are rejected before any compute runs. Environment variables override
file values as PDSSM_<SECTION>_<FIELD> (PDSSM_TRAIN_STEPS=500,
PDSSM_MODEL_STATE=64) or PDSSM_<KEY> for the top-level scalars; command-line
flags override both.

All randomness flows from the single root seed: model initialization uses it
directly, training batches split off (seed, 1, step), stochastic routing
(seed, 2, step), in-loop evaluation (seed, 3, step), and the eval command
splits per evaluated length inside evaluate_length_generalization. Reruns
with the same config are therefore byte-identical in every artifact except
run.log, which is where timestamps live, and bench.csv, whose medians are
wall-clock measurements.

Exit codes: 0 ok, 2 config error (unreadable or invalid config, bad task,
missing checkpoint, shape mismatch, FSA parse error), 3 runtime abort
(training divergence, non-finite bench states), 4 verification failure
(replay mismatch or corrupt checkpoint in verify, ordering violation under
bench --assert-ordering).
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import datetime
import os
import sys

import numpy as np
import yaml

from . import bench as bn
from . import fsa_tasks as ft
from . import model as md
from . import train_eval as te

__all__ = ["main", "ConfigError", "apply_env", "load_config"]


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"seed", "out", "workers", "checkpoint", "task", "model", "train",
             "eval", "bench"}
_TOP_SCALARS = {"seed", "out", "workers", "checkpoint"}
_SECTIONS = ("task", "model", "train", "eval", "bench")
_ENV_PREFIX = "PDSSM_"
# documented non-config toggles that share the prefix
_ENV_IGNORE = {"PDSSM_ACCEPTANCE_SCALE"}

_BUILTIN_TASKS = {
    "parity": ft.make_parity,
    "even_pairs": ft.make_even_pairs,
    "cycle_nav": ft.make_cycle_nav,
    "mod_arith": ft.make_mod_arith,
}


def _coerce(obj):
    """YAML has no tuples; our schemas want them for every sequence."""
    if isinstance(obj, dict):
        return {k: _coerce(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return tuple(_coerce(v) for v in obj)
    return obj


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return _coerce(raw)


def apply_env(cfg, environ):
    out = copy.deepcopy(dict(cfg))
    for key in sorted(environ):
        if not key.startswith(_ENV_PREFIX) or key in _ENV_IGNORE:
            continue
        tail = key[len(_ENV_PREFIX):].lower()
        try:
            value = _coerce(yaml.safe_load(environ[key]))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {key}: {exc}") from exc
        if tail in _TOP_SCALARS:
            out[tail] = value
            continue
        section, _, field = tail.partition("_")
        if section in _SECTIONS and field:
            out.setdefault(section, {})[field] = value
        else:
            raise ConfigError(f"unrecognized environment override {key}")
    return out


def _section(cfg, name):
    val = cfg.get(name) or {}
    if not isinstance(val, dict):
        raise ConfigError(f"{name} section must be a mapping")
    return dict(val)


def _make(cls, kwargs, where):
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(kwargs) - allowed):
        raise ConfigError(f"unknown key '{key}' in {where} section")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# --- task and model resolution -----------------------------------------------


def _task_fsa(cfg, args):
    if getattr(args, "fsa", None):
        return _load_fsa_file(args.fsa)
    section = _section(cfg, "task")
    if getattr(args, "task", None):
        section["name"] = args.task
    for key in sorted(set(section) - {"name", "file", "extra_generators", "gen_seed"}):
        raise ConfigError(f"unknown key '{key}' in task section")
    if section.get("file"):
        return _load_fsa_file(section["file"])
    name = section.get("name")
    if not name:
        raise ConfigError("no task given: pass --fsa/--task or a task section")
    if name in _BUILTIN_TASKS:
        return _BUILTIN_TASKS[name]()
    try:
        return ft.make_group_fsa(name, section.get("extra_generators"),
                                 int(section.get("gen_seed", 0)))
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from exc


def _load_fsa_file(path):
    try:
        return ft.load_fsa(path)
    except OSError as exc:
        raise ConfigError(f"cannot read automaton file: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"automaton file: {exc}") from exc


def _model_config(cfg, fsa, required):
    section = _section(cfg, "model")
    if not section and not required:
        return None
    for key, want, what in (("vocab", fsa.num_symbols, "alphabet"),
                            ("n_classes", fsa.num_states, "state count")):
        if key in section and section[key] != want:
            raise ConfigError(
                f"model.{key}={section[key]} conflicts with the task {what} {want}")
    section["vocab"] = fsa.num_symbols
    section["n_classes"] = fsa.num_states
    section.setdefault("depth", 1)
    return _make(md.ModelConfig, section, "model")


def _out_dir(cfg):
    out = cfg.get("out")
    if not out:
        raise ConfigError("no output directory: pass --out or set out:")
    os.makedirs(out, exist_ok=True)
    return out


def _write_resolved(cfg, out_dir):
    def plain(obj):
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    with open(os.path.join(out_dir, "config.yaml"), "w", encoding="utf-8") as f:
        yaml.safe_dump(plain(cfg), f, sort_keys=True)


# --- subcommands -------------------------------------------------------------


def cmd_train(cfg, args):
    out_dir = _out_dir(cfg)
    seed = int(cfg.get("seed", 0))
    fsa = _task_fsa(cfg, args)
    model_cfg = _model_config(cfg, fsa, required=True)
    tcfg = _make(te.TrainConfig, {**_section(cfg, "train"), "seed": seed}, "train")
    params = md.init_model(model_cfg, seed=seed)
    params, rows = te.train(params, fsa, tcfg)
    te.write_metrics_csv(rows, os.path.join(out_dir, "metrics.csv"))
    md.save_checkpoint(os.path.join(out_dir, "final.ckpt"), params)
    _write_resolved(cfg, out_dir)
    with open(os.path.join(out_dir, "run.log"), "w", encoding="utf-8") as f:
        for r in rows:
            stamp = datetime.datetime.now().isoformat(timespec="seconds")
            f.write(f"{stamp} step={r.step} split={r.split} length={r.length} "
                    f"accuracy={r.accuracy} loss={r.loss}\n")
    for r in rows:
        if r.split == "val" and r.step == tcfg.steps:
            print(f"final eval length {r.length}: accuracy {r.accuracy:.4f}")
    print(f"wrote {out_dir}/metrics.csv and {out_dir}/final.ckpt")
    return 0


def cmd_eval(cfg, args):
    out_dir = _out_dir(cfg)
    seed = int(cfg.get("seed", 0))
    fsa = _task_fsa(cfg, args)
    ckpt = getattr(args, "ckpt", None) or cfg.get("checkpoint")
    if not ckpt:
        raise ConfigError("no checkpoint: pass --ckpt or set checkpoint:")
    model_cfg = _model_config(cfg, fsa, required=False)
    if model_cfg is None:
        # no model section: assume a compiler-produced checkpoint
        model_cfg = ft.compile_to_ssm(fsa).config
    params = _load_ckpt(ckpt, model_cfg)
    section = _section(cfg, "eval")
    for key in sorted(set(section) - {"lengths", "n_per_length", "p_variant", "batch_cap"}):
        raise ConfigError(f"unknown key '{key}' in eval section")
    lengths = section.get("lengths")
    if not lengths:
        raise ConfigError("eval.lengths is required")
    pairs = te.evaluate_length_generalization(
        params, fsa, lengths, int(section.get("n_per_length", 256)), seed,
        p_variant=section.get("p_variant", "hard"),
        batch_cap=int(section.get("batch_cap", 256)))
    with open(os.path.join(out_dir, "eval.csv"), "w", encoding="utf-8", newline="") as f:
        f.write("length,accuracy\n")
        for ln, acc in pairs:
            f.write(f"{ln},{acc!r}\n")
    mean = float(np.mean([acc for _, acc in pairs]))
    print(f"mean accuracy {mean:.4f} over {len(pairs)} lengths")
    return 0


def _load_ckpt(path, model_cfg):
    try:
        return md.load_checkpoint(path, model_cfg)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"checkpoint does not match the task: {exc}") from exc


def cmd_compile(cfg, args):
    out_dir = _out_dir(cfg)
    fsa = _task_fsa(cfg, args)
    params = ft.compile_to_ssm(fsa)
    ckpt = os.path.join(out_dir, "compiled.ckpt")
    md.save_checkpoint(ckpt, params)
    ft.save_fsa(os.path.join(out_dir, "task.fsa"), fsa)
    print(f"compiled {fsa.num_states} states, {fsa.num_symbols} symbols -> {ckpt}")
    return 0


def cmd_verify(cfg, args):
    fsa = _task_fsa(cfg, args)
    ckpt = getattr(args, "ckpt", None) or cfg.get("checkpoint")
    if not ckpt:
        raise ConfigError("no checkpoint: pass --ckpt or set checkpoint:")
    model_cfg = ft.compile_to_ssm(fsa).config
    try:
        params = md.load_checkpoint(ckpt, model_cfg)
    except FileNotFoundError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from exc
    except (OSError, ValueError) as exc:
        print(f"verify FAIL: unusable checkpoint: {exc}")
        return 4
    words, max_len = args.words, args.max_len
    seed = int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    done = 0
    while done < words:
        k = min(32, words - done)
        lens = rng.integers(1, max_len + 1, size=k)
        tokens = rng.integers(0, fsa.num_symbols, (k, int(lens.max())))
        for i in range(k):
            tokens[i, lens[i]:] = 0
        logits, _ = md.forward_batch(params, tokens, lengths=lens,
                                     per_position=True, want_tape=False)
        pred = np.argmax(logits, axis=-1)
        traj = ft.fsa_run_batch(fsa, tokens, lens)[:, 1:]
        valid = np.arange(tokens.shape[1])[None, :] < lens[:, None]
        bad = (pred != traj) & valid
        if np.any(bad):
            i, t = np.argwhere(bad)[0]
            word = tokens[i, : lens[i]].tolist()
            print(f"verify FAIL: word {done + i} position {t}: expected state "
                  f"{traj[i, t]}, got {pred[i, t]}; word={word}")
            return 4
        done += k
    print(f"verify PASS: {words} words up to length {max_len}")
    return 0


def _ordering_violations(rows):
    """diagonal <= pd <= dense cells with N >= 128 (smaller N is overhead-bound)."""
    cells = {}
    for r in rows:
        if not r.skipped and r.median_s is not None:
            cells.setdefault((r.l, r.n), {})[r.structure] = r.median_s
    msgs = []
    for (l, n) in sorted(cells):
        if n < 128:
            continue
        cell = cells[(l, n)]
        for fast, slow in (("diagonal", "pd"), ("pd", "dense")):
            if fast in cell and slow in cell and cell[fast] > cell[slow]:
                msgs.append(f"N={n} L={l}: {fast} ({cell[fast]:.6f}s) > "
                            f"{slow} ({cell[slow]:.6f}s)")
    return msgs


def cmd_bench(cfg, args):
    out_dir = _out_dir(cfg)
    seed = int(cfg.get("seed", 0))
    workers = cfg.get("workers")
    if workers is None:
        workers = os.cpu_count() or 1
    kwargs = {**_section(cfg, "bench"), "seed": seed, "workers": int(workers)}
    bcfg = _make(bn.BenchConfig, kwargs, "bench")
    rows = bn.bench_scan(bcfg)
    bn.write_bench_csv(rows, os.path.join(out_dir, "bench.csv"))
    for r in rows:
        if r.skipped:
            print(f"{r.structure:9s} N={r.n:5d} L={r.l:5d} skipped: {r.note}")
        else:
            print(f"{r.structure:9s} N={r.n:5d} L={r.l:5d} "
                  f"median {r.median_s:.6f}s iqr {r.iqr_s:.6f}s")
    try:
        for structure, slope in bn.bench_fit_scaling(rows).items():
            print(f"{structure}: runtime ~ N^{slope:.2f}")
    except ValueError:
        pass
    if args.assert_ordering:
        msgs = _ordering_violations(rows)
        if msgs:
            for m in msgs:
                print(f"ordering violation: {m}")
            return 4
    return 0


# --- entry -------------------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="pdssm",
        description="state tracking with one-hot-column recurrences: "
                    "train, eval, compile, verify, bench")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="root seed override")
    common.add_argument("--workers", type=int, help="advisory worker count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common],
                       help="train a state tracker on an automaton task")
    p.add_argument("--task", help="builtin task or group name")
    p.add_argument("--fsa", help="automaton text file")

    p = sub.add_parser("eval", parents=[common],
                       help="length-generalization accuracy of a checkpoint")
    p.add_argument("--task", help="builtin task or group name")
    p.add_argument("--fsa", help="automaton text file")
    p.add_argument("--ckpt", help="checkpoint path")

    p = sub.add_parser("compile", parents=[common],
                       help="compile an automaton to exact model weights")
    p.add_argument("--task", help="builtin task or group name")
    p.add_argument("--fsa", help="automaton text file")

    p = sub.add_parser("verify", parents=[common],
                       help="replay random words through a compiled checkpoint")
    p.add_argument("--task", help="builtin task or group name")
    p.add_argument("--fsa", help="automaton text file")
    p.add_argument("--ckpt", help="checkpoint path")
    p.add_argument("--words", type=int, default=100, help="number of words")
    p.add_argument("--max-len", type=int, default=100, help="maximum word length")

    p = sub.add_parser("bench", parents=[common],
                       help="time the forward scan across transition structures")
    p.add_argument("--assert-ordering", action="store_true",
                   help="exit 4 unless diagonal <= pd <= dense at N >= 128")
    return parser


_DISPATCH = {
    "train": cmd_train,
    "eval": cmd_eval,
    "compile": cmd_compile,
    "verify": cmd_verify,
    "bench": cmd_bench,
}


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return int(code) if isinstance(code, int) else (0 if code is None else 2)
    cfg = {}
    try:
        if args.config:
            cfg = load_config(args.config)
        cfg = apply_env(cfg, os.environ)
        for key in sorted(set(cfg) - _TOP_KEYS):
            raise ConfigError(f"unknown top-level config key '{key}'")
        for flag in ("seed", "out", "workers"):
            if getattr(args, flag, None) is not None:
                cfg[flag] = getattr(args, flag)
        return _DISPATCH[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except te.TrainingDiverged as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
