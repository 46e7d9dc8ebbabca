"""Inference-time machinery for distilled one-step generators.

Covers single-pass decoding, an optional re-noise/denoise refinement loop
(the generator is trained for one step; extra steps trade a little
diversity for quality), minimum-Bayes-risk candidate selection, and a
latency benchmark that separates denoiser-loop time from fixed decode
overhead.
"""

from __future__ import annotations

import platform
import statistics
import time

import numpy as np
import torch

from . import data as D
from .distill import generate_one_step_batch, replace_condition
from .metrics import LatencyRow, MetricsReport, bleu
from .schedule import NoiseSchedule, forward_diffuse
from .seqmodel import DenoiserNetwork, EmbeddedSequence, round_to_tokens


def renoise_time_ladder(t_init: int, t_min: int, steps: int) -> np.ndarray:
    """Evenly spaced descending integers from t_init to max(t_min, t_init // steps)."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    t_end = max(t_min, t_init // steps)
    return np.round(np.linspace(t_init, t_end, steps)).astype(int)


def multi_step_embeddings(
    generator: DenoiserNetwork,
    sched: NoiseSchedule,
    cond_tokens: torch.Tensor,
    cond_mask: torch.Tensor,
    steps: int,
    torch_gen: torch.Generator,
    t_init: int,
    t_min: int = 0,
) -> tuple[list, torch.Tensor]:
    """Refine the one-step output by re-noising and re-denoising it.

    Returns the final clean prediction plus every intermediate prediction
    (for invariant checks).  Uses exactly ``steps`` denoiser evaluations.
    """
    times = renoise_time_ladder(t_init, t_min, steps)
    b, L = cond_tokens.shape
    device = generator.embedding.weight.device
    z = torch.randn((b, L, generator.cfg.d), generator=torch_gen).to(device)
    e = generate_one_step_batch(generator, sched, cond_tokens.to(device), cond_mask.to(device), z, t_init)
    intermediates = [e]
    for t_k in times[1:]:
        t_k = int(t_k)
        noise = torch.randn(e.values.shape, generator=torch_gen).to(device)
        e_t = forward_diffuse(e, t_k, sched, noise)
        e_hat = generator.denoise(e_t, t_k)
        e = replace_condition(
            EmbeddedSequence(e_hat, e.cond_mask, e.pad_mask), intermediates[0]
        )
        intermediates.append(e)
    return intermediates, e.values


def multi_step_generate(
    generator: DenoiserNetwork,
    sched: NoiseSchedule,
    src_ids,
    steps: int,
    torch_gen: torch.Generator,
    t_init: int,
    t_min: int = 0,
) -> list[int]:
    """Generate target token ids for one source with ``steps`` refinement passes."""
    return multi_step_generate_batch(
        generator, sched, [src_ids], steps, torch_gen, t_init, t_min
    )[0]


def multi_step_generate_batch(
    generator: DenoiserNetwork,
    sched: NoiseSchedule,
    src_list,
    steps: int,
    torch_gen: torch.Generator,
    t_init: int,
    t_min: int = 0,
) -> list[list[int]]:
    L = generator.cfg.max_len
    frames = [D.cond_frame(s, L) for s in src_list]
    tokens = torch.cat([f[0] for f in frames])
    cond_mask = torch.cat([f[1] for f in frames])
    with torch.no_grad():
        intermediates, _ = multi_step_embeddings(
            generator, sched, tokens, cond_mask, steps, torch_gen, t_init, t_min
        )
        ids = round_to_tokens(intermediates[-1], generator)
    out = []
    for row, src in zip(ids.tolist(), src_list):
        cut = []
        for tok in row[len(list(src)) + 1 :]:
            if tok == D.PAD_ID:
                break
            cut.append(int(tok))
        out.append(cut)
    return out


def mbr_select(candidates, risk=None):
    """Pick the candidate with minimum mean risk against the others.

    Default risk is ``1 - bleu(candidate_i, candidate_j)``; a single
    candidate is returned unchanged and ties go to the lowest index.
    """
    if not candidates:
        raise ValueError("mbr_select needs at least one candidate")
    if len(candidates) == 1:
        return candidates[0]
    if risk is None:
        risk = lambda a, b: 1.0 - bleu(a, b)
    best_idx = 0
    best_risk = None
    for i, cand in enumerate(candidates):
        r = statistics.fmean(risk(cand, other) for j, other in enumerate(candidates) if j != i)
        if best_risk is None or r < best_risk:
            best_idx, best_risk = i, r
    return candidates[best_idx]


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine() or "unknown-cpu"
    return (
        f"{cpu} / {platform.system()} {platform.release()} / "
        f"torch {torch.__version__} / threads {torch.get_num_threads()}"
    )


def benchmark_latency(
    generator: DenoiserNetwork,
    sched: NoiseSchedule,
    vocab: D.Vocabulary,
    src_batch,
    steps_list,
    repeats: int = 5,
    t_init: int = 1490,
    seed: int = 0,
    warmup: int = 1,
) -> MetricsReport:
    """Wall-clock seconds per sample at each step count, loop and overhead split.

    The denoiser loop (network passes plus re-noising arithmetic) is timed
    separately from the fixed per-sample cost of rounding embeddings back to
    tokens and detokenizing, which is what keeps end-to-end time from
    scaling linearly in steps.  Warm-up runs are excluded.  The benchmark
    runs single-worker (no intra-run parallelism beyond the configured
    torch threads) to avoid contention artifacts.
    """
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    L = generator.cfg.max_len
    frames = [D.cond_frame(s, L) for s in src_batch]
    tokens = torch.cat([f[0] for f in frames])
    cond_mask = torch.cat([f[1] for f in frames])
    cond_len = cond_mask.sum(dim=1).tolist()
    b = tokens.shape[0]
    rows = []
    with torch.no_grad():
        for steps in steps_list:
            gen = torch.Generator().manual_seed(seed)
            for _ in range(warmup):
                multi_step_embeddings(
                    generator, sched, tokens, cond_mask, steps, gen, t_init
                )
            totals, loops, overheads = [], [], []
            for _ in range(repeats):
                t0 = time.perf_counter()
                intermediates, _ = multi_step_embeddings(
                    generator, sched, tokens, cond_mask, steps, gen, t_init
                )
                t1 = time.perf_counter()
                ids = round_to_tokens(intermediates[-1], generator)
                D.decode_target_rows(ids, cond_len, vocab)
                t2 = time.perf_counter()
                loops.append((t1 - t0) / b)
                overheads.append((t2 - t1) / b)
                totals.append((t2 - t0) / b)
            rows.append(
                LatencyRow(
                    steps=int(steps),
                    mean_s=statistics.fmean(totals),
                    std_s=statistics.stdev(totals),
                    loop_s=statistics.fmean(loops),
                    overhead_s=statistics.fmean(overheads),
                )
            )
    report = MetricsReport(latency=rows)
    report.meta["hardware"] = hardware_descriptor()
    report.meta["workers"] = "single worker"
    report.meta["batch_size"] = b
    report.meta["repeats"] = repeats
    return report
