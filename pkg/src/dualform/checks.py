"""Randomized parallel-vs-recurrent equivalence checks for the dual-form kinds."""

from __future__ import annotations

import time

import numpy as np
import torch

from . import featmaps as fm
from .mixers import MixerConfig, MixerWeights, TokenSequence, mix_parallel, mix_step, state_init


def equivalence_trial(
    kind: str,
    seed: int,
    max_t: int = 32,
    max_gap: int = 60,
    d_model: int = 16,
    n_heads: int = 2,
    batch: int = 2,
) -> dict:
    """One seeded trial: draw ``T`` and date gaps, compare both paths row by row.

    Time kinds get ``max_span = max(700, span)`` so long draws stay legal.
    """
    rng = np.random.default_rng(seed)
    t = int(rng.integers(1, max_t + 1))
    gaps = rng.integers(1, max_gap + 1, size=t - 1)
    dates = np.concatenate(([0], np.cumsum(gaps))).astype(np.float64)
    span = float(dates[-1])
    max_span = max(fm.DEFAULT_TIME_SPAN, span) if kind in fm.TIME_KINDS else None
    config = MixerConfig.build(kind, d_model, n_heads=n_heads, max_span=max_span)
    weights = MixerWeights(config, torch.Generator().manual_seed(seed))
    tokens = torch.from_numpy(rng.standard_normal((batch, t, d_model)))
    seq = TokenSequence(tokens, torch.from_numpy(dates))
    with torch.no_grad():
        parallel = mix_parallel(config, weights, seq)
        state = state_init(config, batch)
        rows = []
        for i in range(t):
            position = dates[i] if config.is_time else float(i)
            out, state = mix_step(config, weights, state, tokens[:, i], position)
            rows.append(out)
    recurrent = torch.stack(rows, dim=1)
    return {"kind": kind, "seed": seed, "T": t, "span_days": span, "max_abs_diff": float((parallel - recurrent).abs().max())}


def run_equivalence(kinds=fm.RECURRENT_KINDS, trials: int = 100, tol: float = 1e-5, seed: int = 0) -> dict:
    start = time.process_time()
    per_kind = {}
    for kind in kinds:
        worst = max(
            (equivalence_trial(kind, seed * 100_003 + i) for i in range(trials)),
            key=lambda r: r["max_abs_diff"],
        )
        per_kind[kind] = {"max_abs_diff": worst["max_abs_diff"], "worst_trial": worst, "passed": worst["max_abs_diff"] <= tol}
    return {
        "trials": trials,
        "tolerance": tol,
        "kinds": per_kind,
        "passed": all(v["passed"] for v in per_kind.values()),
        "cpu_seconds": time.process_time() - start,
    }
