"""Adam training on automaton state tracking, plus length-sweep evaluation.

Everything is derived from (config, seed): batches come from per-step seed
keys, stochastic routing noise from its own stream, and evaluation from fresh
keyed samples, so a run is exactly reproducible.
"""

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import fsa_tasks as ft
from . import model as md


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0  # 0 disables clipping
    seed: int = 0
    len_lo: int = 3
    len_hi: int = 40
    eval_lengths: tuple = (40, 64, 96, 128, 192, 256)
    eval_every: int = 1000
    n_eval: int = 256
    p_variant: str = "hard"
    per_position: bool = False
    lr_schedule: str = "constant"
    anneal_from: float = 0.0  # fraction of steps the cosine holds flat first
    stop_at_eval_mean: Optional[float] = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be constant or cosine")
        if not 0.0 <= self.anneal_from < 1.0:
            raise ValueError("anneal_from must lie in [0, 1)")
        for name in ("batch_size", "eval_every", "n_eval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        # lr 0 is allowed: it freezes parameters, useful for eval-only passes
        if self.lr < 0 or self.eps <= 0 or self.clip_norm < 0:
            raise ValueError("lr/clip_norm must be >= 0 and eps > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not 1 <= self.len_lo <= self.len_hi:
            raise ValueError("need 1 <= len_lo <= len_hi")
        if not self.eval_lengths:
            raise ValueError("eval_lengths must be nonempty")
        if self.p_variant not in ("hard", "stochastic"):
            raise ValueError("training uses hard or stochastic routing; the "
                             "dense-softmax variant is inference-only")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LogRow:
    step: int
    split: str
    length: Optional[int]
    accuracy: Optional[float]
    loss: Optional[float]


def init_moments(flat):
    return {"m": {n: np.zeros_like(a) for n, a in flat.items()},
            "v": {n: np.zeros_like(a) for n, a in flat.items()}}


def adam_step(flat, grads, moments, t, cfg, lr=None):
    """Bias-corrected Adam, in place on the flat parameter dict."""
    if lr is None:
        lr = cfg.lr
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        p = flat[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param {p.shape}")
        m = moments["m"][name]
        v = moments["v"][name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def schedule_lr(cfg, step):
    """Step learning rate; cosine decays to zero over the configured steps.

    anneal_from > 0 keeps the rate flat for that fraction of the run and fits
    the half-cosine into the remainder, so exploration happens at full rate
    and the decay only has to settle what is already learned.
    """
    if cfg.lr_schedule == "constant":
        return cfg.lr
    frac = (step - 1) / max(cfg.steps, 1)
    if frac < cfg.anneal_from:
        return cfg.lr
    frac = (frac - cfg.anneal_from) / (1.0 - cfg.anneal_from)
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def clip_grads_(grads, max_norm):
    """Scale all gradients in place to global norm <= max_norm; returns norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def evaluate_length_generalization(params, fsa, lengths, n_per_length, seed,
                                   p_variant="hard", batch_cap=256):
    """Exact-match accuracy of the final-state prediction per length."""
    out = []
    for ln in lengths:
        correct = 0
        done = 0
        while done < n_per_length:
            b = min(batch_cap, n_per_length - done)
            tokens, labels, _ = ft.sample_batch(fsa, ln, ln, b,
                                                seed=(seed, ln, done))
            logits, _ = md.forward_batch(params, tokens, p_variant=p_variant,
                                         want_tape=False)
            correct += int(np.sum(np.argmax(logits, axis=-1) == labels))
            done += b
        out.append((int(ln), correct / n_per_length))
    return out


def _eval_rows(params, fsa, cfg, step):
    # cap 128 keeps the padded scan slabs modest at the longest eval lengths
    accs = evaluate_length_generalization(params, fsa, cfg.eval_lengths,
                                          cfg.n_eval, seed=(cfg.seed, 3, step),
                                          batch_cap=128)
    return [LogRow(step=step, split="val", length=ln, accuracy=acc, loss=None)
            for ln, acc in accs]


def train(params, fsa, cfg):
    """Run the loop; returns (params, log rows). Raises TrainingDiverged on NaN.

    The model is updated in place (pass a fresh init_model or compiled weights
    to warm start). Evaluation runs every eval_every steps and at the end.
    """
    flat = md.flatten_params(params)
    trainable = {n: a for n, a in flat.items() if not n.startswith("x0.")}
    moments = init_moments(trainable)
    rows = []
    if cfg.steps == 0:
        return params, _eval_rows(params, fsa, cfg, step=0)
    losses, hits, seen = [], 0, 0
    for step in range(1, cfg.steps + 1):
        tokens, labels, lengths = ft.sample_batch(
            fsa, cfg.len_lo, cfg.len_hi, cfg.batch_size, seed=(cfg.seed, 1, step))
        rng = (np.random.default_rng((cfg.seed, 2, step))
               if cfg.p_variant == "stochastic" else None)
        logits, tape = md.forward_batch(params, tokens, lengths=lengths,
                                        p_variant=cfg.p_variant, rng=rng,
                                        per_position=cfg.per_position)
        if cfg.per_position:
            traj = ft.fsa_run_batch(fsa, tokens, lengths)
            loss, gl = md.cross_entropy_positions(logits, traj[:, 1:], lengths)
            final_logits = logits[np.arange(len(tokens)), lengths - 1]
        else:
            loss, gl = md.cross_entropy_final(logits, labels)
            final_logits = logits
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss!r} at step {step}")
        grads = md.model_backward(tape, gl)
        gnorm = clip_grads_(grads, cfg.clip_norm)
        if not np.isfinite(gnorm):
            raise TrainingDiverged(
                f"non-finite gradient norm {gnorm!r} at step {step}")
        adam_step(trainable, grads, moments, step, cfg, lr=schedule_lr(cfg, step))
        params.bump()
        losses.append(float(loss))
        hits += int(np.sum(np.argmax(final_logits, axis=-1) == labels))
        seen += len(tokens)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            rows.append(LogRow(step=step, split="train", length=None,
                               accuracy=hits / seen, loss=float(np.mean(losses))))
            val = _eval_rows(params, fsa, cfg, step)
            rows.extend(val)
            losses, hits, seen = [], 0, 0
            if cfg.stop_at_eval_mean is not None:
                mean = float(np.mean([r.accuracy for r in val]))
                if mean >= cfg.stop_at_eval_mean:
                    break
    return params, rows


def write_metrics_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "split", "length", "accuracy", "loss"])
        for r in rows:
            w.writerow([r.step, r.split,
                        "" if r.length is None else r.length,
                        "" if r.accuracy is None else repr(float(r.accuracy)),
                        "" if r.loss is None else repr(float(r.loss))])
