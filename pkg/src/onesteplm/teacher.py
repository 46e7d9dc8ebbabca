"""Teacher pretraining and the iterative reference sampler.

The teacher is a denoiser trained with posterior-mean regression on noised
target embeddings (conditions stay clean) plus a small cross-entropy
rounding term through the tied lm-head, which keeps the jointly-learned
embedding matrix decodable.  Sampling walks a descending time ladder,
re-noising the current prediction and re-clamping condition positions at
every step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import EncodedPairs, PAD_ID, batch_tensors, cond_frame
from .schedule import GaussianWorld, NoiseSchedule, gaussian_posterior_mean
from .seqmodel import (
    DenoiserNetwork,
    EmbeddedSequence,
    ModelConfig,
    embed_tokens,
    round_to_tokens,
)


@dataclass
class TeacherConfig:
    steps: int = 8000
    batch_size: int = 32
    lr: float = 1e-4
    betas: tuple[float, float] = (0.0, 0.999)
    weight_decay: float = 0.0
    rounding_coeff: float = 0.1
    grad_clip: float = 1.0
    val_every: int = 500
    seed: int = 0
    device: str = "cpu"
    log_every: int = 100


def _diffuse_per_sample(e: EmbeddedSequence, t_vec: torch.Tensor, sched: NoiseSchedule, noise):
    """Forward diffusion with one time index per row; conditions pass through."""
    a = torch.from_numpy(sched.alpha[t_vec.cpu().numpy()]).to(e.values).view(-1, 1, 1)
    s = torch.from_numpy(sched.sigma[t_vec.cpu().numpy()]).to(e.values).view(-1, 1, 1)
    noised = a * e.values + s * noise
    return EmbeddedSequence(
        values=torch.where(e.cond_mask.unsqueeze(-1), e.values, noised),
        cond_mask=e.cond_mask,
        pad_mask=e.pad_mask,
    )


def teacher_loss(
    net: DenoiserNetwork,
    tokens: torch.Tensor,
    cond_mask: torch.Tensor,
    pad_mask: torch.Tensor,
    t_vec: torch.Tensor,
    sched: NoiseSchedule,
    noise: torch.Tensor,
    rounding_coeff: float,
):
    """Regression + rounding loss on the target span of one batch."""
    e = embed_tokens(net, tokens, cond_mask, pad_mask)
    e_t = _diffuse_per_sample(e, t_vec, sched, noise)
    e_hat = net.denoise(e_t, t_vec)
    target = e.target_mask
    if not bool(target.any()):
        raise ValueError("batch has no target positions")
    dsm = (e_hat[target] - e.values[target]).pow(2).mean()
    ce = F.cross_entropy(net.logits(e_hat[target]), tokens.to(e.values.device)[target])
    return dsm + rounding_coeff * ce, float(dsm), float(ce)


def validation_dsm(
    net: DenoiserNetwork,
    enc: EncodedPairs,
    sched: NoiseSchedule,
    seed: int = 1234,
    batch_size: int = 64,
    max_batches: int = 4,
) -> float:
    """Mean target-span regression loss on a fixed probe (fixed draws)."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    losses = []
    net.eval()
    with torch.no_grad():
        for _ in range(max_batches):
            idx = rng.integers(0, enc.tokens.shape[0], size=min(batch_size, enc.tokens.shape[0]))
            tokens, cond_mask, pad_mask = batch_tensors(enc, idx)
            e = embed_tokens(net, tokens, cond_mask, pad_mask)
            t_vec = torch.randint(0, sched.T, (tokens.shape[0],), generator=gen)
            noise = torch.randn(e.values.shape, generator=gen)
            e_t = _diffuse_per_sample(e, t_vec, sched, noise)
            e_hat = net.denoise(e_t, t_vec)
            target = e.target_mask
            losses.append(float((e_hat[target] - e.values[target]).pow(2).mean()))
    net.train()
    return sum(losses) / len(losses)


def pretrain_teacher(
    train_enc: EncodedPairs,
    valid_enc: EncodedPairs,
    model_cfg: ModelConfig,
    sched: NoiseSchedule,
    cfg: TeacherConfig,
    log=None,
) -> tuple[DenoiserNetwork, list[tuple[int, float]]]:
    """Train a teacher from scratch; returns the network and the validation history.

    Aborts with the offending step number if the loss becomes non-finite.
    """
    torch.manual_seed(cfg.seed)
    net = DenoiserNetwork(model_cfg, role="teacher").to(cfg.device)
    net.train()
    opt = torch.optim.AdamW(
        net.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 2)
    history: list[tuple[int, float]] = []
    started = time.time()
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, train_enc.tokens.shape[0], size=cfg.batch_size)
        tokens, cond_mask, pad_mask = batch_tensors(train_enc, idx, device=cfg.device)
        t_vec = torch.randint(0, sched.T, (cfg.batch_size,), generator=gen)
        noise = torch.randn(
            (cfg.batch_size, train_enc.L, model_cfg.d), generator=gen
        ).to(cfg.device)
        loss, dsm, ce = teacher_loss(
            net, tokens, cond_mask, pad_mask, t_vec, sched, noise, cfg.rounding_coeff
        )
        if not math.isfinite(float(loss)):
            raise RuntimeError(f"teacher pretraining diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        if log is not None and step % cfg.log_every == 0:
            log(f"step={step} loss={float(loss):.6f} dsm={dsm:.6f} ce={ce:.6f} "
                f"elapsed_s={time.time() - started:.1f}")
        if step % cfg.val_every == 0 or step == cfg.steps:
            vd = validation_dsm(net, valid_enc, sched, seed=cfg.seed + 3)
            history.append((step, vd))
            if log is not None:
                log(f"step={step} val_dsm={vd:.6f}")
    net.check_embedding_separation()
    return net, history


def sample_time_ladder(t_start: int, t_end: int, steps: int) -> np.ndarray:
    """Evenly spaced descending integer times from t_start to t_end, inclusive."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return np.round(np.linspace(t_start, t_end, steps)).astype(int)


def sample_embeddings(
    net: DenoiserNetwork,
    sched: NoiseSchedule,
    cond_tokens: torch.Tensor,
    cond_mask: torch.Tensor,
    steps: int,
    generator: torch.Generator,
    mode: str = "ancestral",
) -> EmbeddedSequence:
    """Iterative refinement from pure noise, clamping conditions every step.

    ``mode='ancestral'`` re-noises the current prediction with fresh noise;
    ``mode='deterministic'`` carries the implied residual noise forward
    (no new randomness after the initial draw).
    """
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must lie in [1, {sched.T}], got {steps}")
    if mode not in ("ancestral", "deterministic"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    device = net.embedding.weight.device
    pad_mask = torch.zeros_like(cond_mask)
    e_cond = embed_tokens(net, cond_tokens, cond_mask, pad_mask)
    keep = cond_mask.unsqueeze(-1).to(device)
    z = torch.randn(e_cond.values.shape, generator=generator).to(device)
    values = torch.where(keep, e_cond.values, float(sched.sigma[sched.T - 1]) * z)
    times = sample_time_ladder(sched.T - 1, 0, steps)
    for k, t in enumerate(times):
        t = int(t)
        e_hat = net.denoise(EmbeddedSequence(values, cond_mask, pad_mask), t)
        e_hat = torch.where(keep, e_cond.values, e_hat)
        if k + 1 == len(times):
            break
        t_next = int(times[k + 1])
        a_next, s_next = float(sched.alpha[t_next]), float(sched.sigma[t_next])
        if mode == "ancestral":
            eps = torch.randn(values.shape, generator=generator).to(device)
        else:
            eps = (values - float(sched.alpha[t]) * e_hat) / float(sched.sigma[t])
        values = torch.where(keep, e_cond.values, a_next * e_hat + s_next * eps)
    return EmbeddedSequence(e_hat, cond_mask, pad_mask)


def teacher_sample(
    net: DenoiserNetwork,
    sched: NoiseSchedule,
    src_ids,
    steps: int,
    generator: torch.Generator,
    mode: str = "ancestral",
) -> list[int]:
    """Generate target token ids for one source (cut at the first pad)."""
    return teacher_sample_batch(net, sched, [src_ids], steps, generator, mode)[0]


def teacher_sample_batch(
    net: DenoiserNetwork,
    sched: NoiseSchedule,
    src_list,
    steps: int,
    generator: torch.Generator,
    mode: str = "ancestral",
) -> list[list[int]]:
    L = net.cfg.max_len
    frames = [cond_frame(s, L) for s in src_list]
    tokens = torch.cat([f[0] for f in frames])
    cond_mask = torch.cat([f[1] for f in frames])
    with torch.no_grad():
        final = sample_embeddings(net, sched, tokens, cond_mask, steps, generator, mode)
        ids = round_to_tokens(final, net)
    out = []
    for row, (src, _) in zip(ids.tolist(), frames):
        tail = row[len(list(src)) + 1 :]
        cut = []
        for tok in tail:
            if tok == PAD_ID:
                break
            cut.append(int(tok))
        out.append(cut)
    return out


def train_gaussian_denoiser(
    world: GaussianWorld,
    sched: NoiseSchedule,
    d: int,
    seq_len: int,
    steps: int = 4000,
    batch_size: int = 256,
    lr: float = 2e-3,
    width: int = 96,
    seed: int = 0,
    device: str = "cpu",
    log=None,
) -> DenoiserNetwork:
    """Fit the denoiser to isotropic-Gaussian sequences (no tokens, no conditions).

    Used to check the learned denoiser against the closed-form posterior
    mean; the embedding table exists but is unused.  The regression is
    reweighted by the inverse noised-marginal variance so every time index
    contributes comparably.
    """
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab_size=4, d=d, n_layers=2, n_heads=2, max_len=seq_len, width=width)
    net = DenoiserNetwork(cfg, role="teacher").to(device)
    net.train()
    opt = torch.optim.AdamW(net.parameters(), lr=lr, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(seed + 1)
    rng = np.random.default_rng(seed + 2)
    mean_t = torch.from_numpy(np.asarray(world.mean, dtype=np.float32))
    cond = torch.zeros(batch_size, seq_len, dtype=torch.bool)
    inv_var = torch.from_numpy(
        1.0 / np.array([world.marginal_var(t, sched) for t in range(sched.T)])
    ).float()
    for step in range(1, steps + 1):
        e = world.scale * torch.randn((batch_size, seq_len, d), generator=gen) + mean_t
        t_vec = torch.from_numpy(rng.integers(0, sched.T, size=batch_size))
        noise = torch.randn(e.shape, generator=gen)
        seq = EmbeddedSequence(e.to(device), cond.to(device), torch.zeros_like(cond))
        e_t = _diffuse_per_sample(seq, t_vec, sched, noise.to(device))
        e_hat = net.denoise(e_t, t_vec)
        w = inv_var[t_vec].view(-1, 1, 1).to(device)
        loss = (w * (e_hat - seq.values).pow(2)).mean()
        if not math.isfinite(float(loss)):
            raise RuntimeError(f"gaussian denoiser training diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log is not None and step % 500 == 0:
            log(f"step={step} loss={float(loss):.6f}")
    net.eval()
    return net


def gaussian_denoiser_error(
    net: DenoiserNetwork,
    world: GaussianWorld,
    sched: NoiseSchedule,
    t: int,
    n_draws: int = 256,
    seed: int = 99,
) -> float:
    """Normalized error vs. the closed-form posterior mean at time t."""
    gen = torch.Generator().manual_seed(seed)
    d = net.cfg.d
    seq_len = net.cfg.max_len
    mean_t = torch.from_numpy(np.asarray(world.mean, dtype=np.float32))
    e = world.scale * torch.randn((n_draws, seq_len, d), generator=gen) + mean_t
    noise = torch.randn(e.shape, generator=gen)
    a, s = float(sched.alpha[t]), float(sched.sigma[t])
    e_t = a * e + s * noise
    cond = torch.zeros(n_draws, seq_len, dtype=torch.bool)
    with torch.no_grad():
        e_hat = net.denoise(EmbeddedSequence(e_t, cond, torch.zeros_like(cond)), t)
    oracle = gaussian_posterior_mean(world, e_t.double().numpy(), t, sched)
    err = np.linalg.norm(e_hat.double().numpy() - oracle, axis=(1, 2)) / math.sqrt(d * seq_len)
    return float(err.mean())
