"""Adversarial score distillation of a pretrained denoiser into a one-step generator.

Three networks share one architecture and one frozen embedding matrix: the
pretrained teacher (never updated), the student generator, and the student
score estimator (which doubles as the GAN discriminator).  Training
alternates two phases per step: the estimator is regressed onto fresh
generator samples (denoising score matching) while being trained to tell
noised real from noised generated embeddings; the generator is then updated
to close the gap between the teacher's and the estimator's posterior-mean
predictions of its own noised outputs, plus an adversarial term.

Stage 1 distills from scratch (both student networks start as copies of the
teacher) and keeps the checkpoint with the best validation score.  Stage 2
resumes the generator from that checkpoint while resetting the estimator
back to the teacher, realigning it with the much-improved student.  Running
further stages uses stage-2 semantics but has not been observed to help;
quality plateaus early in a third stage.
"""

from __future__ import annotations

import contextlib
import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import data as D
from .metrics import mean_sentence_bleu
from .schedule import NoiseSchedule, forward_diffuse
from .seqmodel import (
    DenoiserNetwork,
    EmbeddedSequence,
    embed_tokens,
    round_to_tokens,
    save_checkpoint,
)

WEIGHT_MODES = ("sid-adaptive", "constant-1")
GAMMA_MODES = ("constant-1", "snr")


@dataclass
class DistillConfig:
    """Distillation hyperparameters; key names mirror the config-file keys."""

    mu: float = 1.2
    t_min: int = 0
    t_max: int = 1976
    t_init: int = 1490
    a_sg_dsm: float = 0.5
    b_sg_adv: float = 0.5
    a_g_sd: float = 0.5
    b_g_adv: float = 0.5
    lr_psi: float = 3e-5
    lr_theta: float = 1e-5
    stage: int = 1
    budget_steps: int = 50000
    val_every: int = 200
    weight_mode: str = "sid-adaptive"
    gamma_mode: str = "constant-1"
    batch_size: int = 32
    seed: int = 0
    betas: tuple[float, float] = (0.0, 0.999)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    disc_t_mode: str = "shared"  # or "independent": fresh t for the adversarial terms
    use_ema: bool = False
    ema_decay: float = 0.999
    val_samples: int = 128
    log_every: int = 50
    watchdog_every: int = 50
    device: str = "cpu"

    def __post_init__(self):
        if not 0 <= self.t_min < self.t_init <= self.t_max:
            raise ValueError(
                f"need 0 <= t_min < t_init <= t_max, got "
                f"({self.t_min}, {self.t_init}, {self.t_max})"
            )
        for name in ("a_sg_dsm", "b_sg_adv", "a_g_sd", "b_g_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.budget_steps <= 0:
            raise ValueError("budget_steps must be positive")
        if self.val_every <= 0:
            raise ValueError("val_every must be positive")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.gamma_mode not in GAMMA_MODES:
            raise ValueError(f"gamma_mode must be one of {GAMMA_MODES}")
        if self.disc_t_mode not in ("shared", "independent"):
            raise ValueError("disc_t_mode must be 'shared' or 'independent'")

    def check_against_schedule(self, sched: NoiseSchedule) -> None:
        if self.t_max > sched.T - 1:
            raise ValueError(f"t_max={self.t_max} exceeds schedule range [0, {sched.T - 1}]")


@dataclass
class DistillState:
    teacher: DenoiserNetwork
    generator: DenoiserNetwork
    estimator: DenoiserNetwork
    opt_generator: torch.optim.Optimizer
    opt_estimator: torch.optim.Optimizer
    step: int = 0
    val_history: list[tuple[int, float]] = field(default_factory=list)
    ema: dict[str, torch.Tensor] | None = None


def _as_denoiser(net):
    return net.denoise if hasattr(net, "denoise") else net


def _as_discriminator(net):
    return net.discriminate if hasattr(net, "discriminate") else net


def _counted(e_t: EmbeddedSequence) -> torch.Tensor:
    counted = e_t.target_mask
    if not bool(counted.any()):
        raise ValueError("no target positions to score")
    return counted


def _gamma(t: int, sched: NoiseSchedule, mode: str) -> float:
    if mode == "constant-1":
        return 1.0
    a, s = float(sched.alpha[t]), float(sched.sigma[t])
    return (a * a) / (s * s)


def dsm_loss(
    estimator,
    e_clean: torch.Tensor,
    e_t: EmbeddedSequence,
    t: int,
    sched: NoiseSchedule,
    gamma_mode: str = "constant-1",
) -> torch.Tensor:
    """Posterior-mean regression onto the clean embedding, target positions only."""
    counted = _counted(e_t)
    e_hat = _as_denoiser(estimator)(e_t, t)
    resid = (e_hat - e_clean)[counted]
    return _gamma(t, sched, gamma_mode) * resid.pow(2).mean()


def _sid_weight(mode: str, e_hat_teacher, e_clean, counted) -> torch.Tensor | float:
    if mode == "constant-1":
        return 1.0
    # adaptive normalization keeps the effective time weight bounded where
    # the raw Tweedie factor alpha^2/sigma^4 would blow up at small t
    scale = (e_hat_teacher - e_clean)[counted].abs().mean().detach()
    return 1.0 / scale.clamp(min=1e-8)


def sid_loss(
    teacher,
    estimator,
    e_clean: torch.Tensor,
    e_t: EmbeddedSequence,
    t: int,
    sched: NoiseSchedule,
    mu: float,
    weight_mode: str = "sid-adaptive",
) -> torch.Tensor:
    """Score-gap objective for the generator.

    Per counted element: ``(1 - mu) * (eh_T - eh_E)^2 + (eh_T - eh_E) * (eh_E - e)``
    where ``eh_T`` / ``eh_E`` are the teacher's and estimator's posterior-mean
    predictions at ``e_t``.  Gradient flows through ``e_clean`` (and hence
    ``e_t``) into both evaluations; both networks' parameters are expected to
    be frozen for the call.  The weight mode realizes the combined
    time-weighting factor.
    """
    counted = _counted(e_t)
    e_hat_teacher = _as_denoiser(teacher)(e_t, t)
    e_hat_est = _as_denoiser(estimator)(e_t, t)
    diff = (e_hat_teacher - e_hat_est)[counted]
    onto = (e_hat_est - e_clean)[counted]
    base = ((1.0 - mu) * diff.pow(2) + diff * onto).mean()
    loss = _sid_weight(weight_mode, e_hat_teacher, e_clean, counted) * base
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite distillation loss at t={t}: "
            f"|teacher|={float(e_hat_teacher.norm()):.3e} "
            f"|estimator|={float(e_hat_est.norm()):.3e} |e|={float(e_clean.norm()):.3e}"
        )
    return loss


def disc_loss(estimator, e_t_real: EmbeddedSequence, e_t_fake: EmbeddedSequence, t: int):
    """Discriminator objective (minimization form): real -> 1, fake -> 0."""
    if e_t_real.values.shape[0] != e_t_fake.values.shape[0]:
        raise ValueError(
            f"batch size mismatch: {e_t_real.values.shape[0]} real "
            f"vs {e_t_fake.values.shape[0]} fake"
        )
    disc = _as_discriminator(estimator)
    logit_real = disc(e_t_real, t)
    logit_fake = disc(e_t_fake, t)
    return 0.5 * (
        F.binary_cross_entropy_with_logits(logit_real, torch.ones_like(logit_real))
        + F.binary_cross_entropy_with_logits(logit_fake, torch.zeros_like(logit_fake))
    )


def gen_adv_loss(estimator, e_t_fake: EmbeddedSequence, t: int, training: bool = True):
    """Generator adversarial objective (minimization form): fool the estimator."""
    if training and not e_t_fake.values.requires_grad:
        raise ValueError("fake embeddings are detached; no gradient path to the generator")
    logit = _as_discriminator(estimator)(e_t_fake, t)
    return F.binary_cross_entropy_with_logits(logit, torch.ones_like(logit))


def replace_condition(
    e_gen: EmbeddedSequence, e_cond: EmbeddedSequence, cond_mask: torch.Tensor | None = None
) -> EmbeddedSequence:
    """Overwrite condition positions of a generated sequence with the true condition."""
    mask = cond_mask if cond_mask is not None else e_gen.cond_mask
    if mask.shape != e_gen.values.shape[:2]:
        raise ValueError(
            f"mask shape {tuple(mask.shape)} != sequence shape {tuple(e_gen.values.shape[:2])}"
        )
    if e_cond.values.shape != e_gen.values.shape:
        raise ValueError("condition and generated shapes differ")
    return replace(
        e_gen, values=torch.where(mask.unsqueeze(-1), e_cond.values, e_gen.values)
    )


def generate_one_step_batch(
    generator: DenoiserNetwork,
    sched: NoiseSchedule,
    cond_tokens: torch.Tensor,
    cond_mask: torch.Tensor,
    z: torch.Tensor,
    t_init: int,
) -> EmbeddedSequence:
    """One denoiser evaluation on conditioned scaled noise.

    Input: condition positions hold their clean embeddings, target positions
    hold ``sigma[t_init] * z``.  The output has the true condition written
    back, so condition positions equal the condition embedding bit-exactly.
    """
    pad_mask = torch.zeros_like(cond_mask)
    e_cond = embed_tokens(generator, cond_tokens, cond_mask, pad_mask)
    if z.shape != e_cond.values.shape:
        raise ValueError(f"z shape {tuple(z.shape)} != {tuple(e_cond.values.shape)}")
    keep = cond_mask.unsqueeze(-1)
    values = torch.where(keep, e_cond.values, float(sched.sigma[t_init]) * z.to(e_cond.values))
    e_hat = generator.denoise(EmbeddedSequence(values, cond_mask, pad_mask), t_init)
    return replace_condition(EmbeddedSequence(e_hat, cond_mask, pad_mask), e_cond)


def generate_one_step(
    generator: DenoiserNetwork, sched: NoiseSchedule, src_ids, z: torch.Tensor, t_init: int
) -> EmbeddedSequence:
    """Single-source convenience wrapper around :func:`generate_one_step_batch`."""
    tokens, cond_mask = D.cond_frame(src_ids, generator.cfg.max_len)
    if z.dim() == 2:
        z = z.unsqueeze(0)
    return generate_one_step_batch(generator, sched, tokens, cond_mask, z, t_init)


def guided_teacher_denoise(
    teacher, e_t: EmbeddedSequence, t: int, guidance_scale: float = 0.0
) -> torch.Tensor:
    """Optional classifier-free-guidance hook, off (scale 0) by default.

    ``(1 + w) * denoise(e_t | cond) - w * denoise(e_t | no cond)`` where the
    unconditional branch zeroes the condition embeddings.  Meaningful only
    for teachers trained with condition dropout; scale 0 reduces exactly to
    the plain denoiser.
    """
    den = _as_denoiser(teacher)
    if guidance_scale == 0.0:
        return den(e_t, t)
    warnings.warn(
        "guided denoising assumes a teacher trained with condition dropout",
        stacklevel=2,
    )
    e_hat_cond = den(e_t, t)
    blanked = torch.where(e_t.cond_mask.unsqueeze(-1), torch.zeros_like(e_t.values), e_t.values)
    e_hat_uncond = den(replace(e_t, values=blanked), t)
    return (1.0 + guidance_scale) * e_hat_cond - guidance_scale * e_hat_uncond


@contextlib.contextmanager
def frozen(net: DenoiserNetwork):
    """Temporarily stop gradient accumulation into a network's parameters."""
    saved = [(p, p.requires_grad) for p in net.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, was in saved:
            p.requires_grad_(was)


def make_distill_state(
    teacher_net: DenoiserNetwork,
    cfg: DistillConfig,
    init_generator: DenoiserNetwork | None = None,
) -> DistillState:
    """Set up the three-network state: generator and estimator start as the teacher.

    For stage 2 pass the best stage-1 generator; the estimator is still
    reset to the teacher (fresh discriminator head either way).  The shared
    embedding matrix is frozen in every role.
    """
    if cfg.stage == 2 and init_generator is None:
        raise ValueError("stage 2 requires the best stage-1 generator checkpoint")
    teacher_net = teacher_net.to(cfg.device)
    teacher_net.requires_grad_(False)
    teacher_net.eval()
    torch.manual_seed(cfg.seed)  # fresh-disc-head init and any lazy state
    if init_generator is not None:
        generator = init_generator.clone_as("generator").to(cfg.device)
    else:
        generator = teacher_net.clone_as("generator").to(cfg.device)
    estimator = teacher_net.clone_as("estimator").to(cfg.device)
    for net in (generator, estimator):
        net.requires_grad_(True)
        net.freeze_embedding()
        net.train()
    opt_generator = torch.optim.AdamW(
        [p for p in generator.parameters() if p.requires_grad],
        lr=cfg.lr_theta, betas=cfg.betas, weight_decay=cfg.weight_decay,
    )
    opt_estimator = torch.optim.AdamW(
        [p for p in estimator.parameters() if p.requires_grad],
        lr=cfg.lr_psi, betas=cfg.betas, weight_decay=cfg.weight_decay,
    )
    ema = None
    if cfg.use_ema:
        ema = {
            name: p.detach().clone()
            for name, p in generator.named_parameters()
            if p.requires_grad
        }
    return DistillState(
        teacher=teacher_net,
        generator=generator,
        estimator=estimator,
        opt_generator=opt_generator,
        opt_estimator=opt_estimator,
        ema=ema,
    )


def _sample_t(cfg: DistillConfig, gen: torch.Generator) -> int:
    return int(torch.randint(cfg.t_min, cfg.t_max + 1, (1,), generator=gen))


def degenerate_stats(ids: torch.Tensor, cond_len) -> tuple[float, float]:
    """Fractions of decoded targets that are empty/all-pad or highly repetitive."""
    n = ids.shape[0]
    n_pad = 0
    n_rep = 0
    for row, c in zip(ids.tolist(), cond_len):
        tail = row[int(c) :]
        cut = []
        for tok in tail:
            if tok == D.PAD_ID:
                break
            cut.append(tok)
        if not cut:
            n_pad += 1
        elif 1.0 - len(set(cut)) / len(cut) > 0.9:
            n_rep += 1
    return n_pad / n, n_rep / n


def distill_step(
    state: DistillState,
    real_batch,
    cond_batch_psi,
    cond_batch_theta,
    cfg: DistillConfig,
    sched: NoiseSchedule,
    torch_gen: torch.Generator,
) -> dict:
    """One alternating update: estimator phase then generator phase.

    ``real_batch`` is ``(tokens, cond_mask, pad_mask)``; the condition
    batches are ``(tokens, cond_mask)`` drawn from the condition marginal
    (independently for each phase).  Returns a stats dict for logging.
    """
    generator, estimator, teacher = state.generator, state.estimator, state.teacher
    device = cfg.device
    d = generator.cfg.d
    stats: dict = {}

    # --- estimator phase ---------------------------------------------------
    tokens_real, cond_real, pad_real = (x.to(device) for x in real_batch)
    if tokens_real.shape[0] == 0:
        raise ValueError("empty real batch")
    cond_tokens, cond_mask = (x.to(device) for x in cond_batch_psi)
    t = _sample_t(cfg, torch_gen)
    t_disc = t if cfg.disc_t_mode == "shared" else _sample_t(cfg, torch_gen)
    z = torch.randn((cond_tokens.shape[0], cond_tokens.shape[1], d), generator=torch_gen).to(device)
    with torch.no_grad():
        e_fake = generate_one_step_batch(generator, sched, cond_tokens, cond_mask, z, cfg.t_init)
    e_real = embed_tokens(estimator, tokens_real, cond_real, pad_real)
    eps_fake = torch.randn(e_fake.values.shape, generator=torch_gen).to(device)
    eps_real = torch.randn(e_real.values.shape, generator=torch_gen).to(device)
    e_t_fake = forward_diffuse(e_fake, t, sched, eps_fake)
    e_t_real = forward_diffuse(e_real, t_disc, sched, eps_real)
    loss_dsm = dsm_loss(estimator, e_fake.values, e_t_fake, t, sched, cfg.gamma_mode)
    if t_disc == t:
        e_t_fake_disc = e_t_fake
    else:
        e_t_fake_disc = forward_diffuse(
            e_fake, t_disc, sched, torch.randn(e_fake.values.shape, generator=torch_gen).to(device)
        )
    loss_disc = disc_loss(estimator, e_t_real, e_t_fake_disc, t_disc)
    loss_psi = cfg.a_sg_dsm * loss_dsm + cfg.b_sg_adv * loss_disc
    if not math.isfinite(float(loss_psi)):
        raise RuntimeError(f"non-finite estimator loss at step {state.step + 1} (t={t})")
    state.opt_estimator.zero_grad(set_to_none=True)
    loss_psi.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for p in estimator.parameters() if p.requires_grad], cfg.grad_clip
        )
    state.opt_estimator.step()
    stats.update(
        t_psi=t, loss_psi=float(loss_psi), loss_dsm=float(loss_dsm), loss_disc=float(loss_disc)
    )

    # --- generator phase ---------------------------------------------------
    cond_tokens2, cond_mask2 = (x.to(device) for x in cond_batch_theta)
    t2 = _sample_t(cfg, torch_gen)
    z2 = torch.randn(
        (cond_tokens2.shape[0], cond_tokens2.shape[1], d), generator=torch_gen
    ).to(device)
    with frozen(estimator), frozen(teacher):
        e_fake2 = generate_one_step_batch(generator, sched, cond_tokens2, cond_mask2, z2, cfg.t_init)
        eps2 = torch.randn(e_fake2.values.shape, generator=torch_gen).to(device)
        e_t_fake2 = forward_diffuse(e_fake2, t2, sched, eps2)
        loss_sid = sid_loss(
            teacher, estimator, e_fake2.values, e_t_fake2, t2, sched, cfg.mu, cfg.weight_mode
        )
        loss_adv = gen_adv_loss(estimator, e_t_fake2, t2)
        loss_theta = cfg.a_g_sd * loss_sid + cfg.b_g_adv * loss_adv
        if not math.isfinite(float(loss_theta)):
            raise RuntimeError(f"non-finite generator loss at step {state.step + 1} (t={t2})")
        state.opt_generator.zero_grad(set_to_none=True)
        loss_theta.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for p in generator.parameters() if p.requires_grad], cfg.grad_clip
            )
        state.opt_generator.step()
    if state.ema is not None:
        with torch.no_grad():
            for name, p in generator.named_parameters():
                if name in state.ema:
                    state.ema[name].mul_(cfg.ema_decay).add_(p.detach(), alpha=1 - cfg.ema_decay)
    stats.update(
        t_theta=t2, loss_theta=float(loss_theta), loss_sid=float(loss_sid),
        loss_adv=float(loss_adv),
    )

    state.step += 1
    if cfg.watchdog_every > 0 and state.step % cfg.watchdog_every == 0:
        with torch.no_grad():
            ids = round_to_tokens(e_fake2, generator)
        cond_len = cond_mask2.sum(dim=1).tolist()
        frac_pad, frac_rep = degenerate_stats(ids, cond_len)
        stats.update(frac_all_pad=frac_pad, frac_repetitive=frac_rep)
        if frac_pad + frac_rep > 0.5:
            warnings.warn(
                f"degenerate generations at step {state.step}: "
                f"{frac_pad:.0%} all-pad, {frac_rep:.0%} repetitive",
                stacklevel=2,
            )
    return stats


@contextlib.contextmanager
def _ema_weights(state: DistillState):
    """Swap EMA weights into the generator for evaluation, if tracked."""
    if state.ema is None:
        yield
        return
    backup = {}
    with torch.no_grad():
        for name, p in state.generator.named_parameters():
            if name in state.ema:
                backup[name] = p.detach().clone()
                p.copy_(state.ema[name])
    try:
        yield
    finally:
        with torch.no_grad():
            for name, p in state.generator.named_parameters():
                if name in backup:
                    p.copy_(backup[name])


def one_step_validation_bleu(
    generator: DenoiserNetwork,
    sched: NoiseSchedule,
    enc: D.EncodedPairs,
    vocab: D.Vocabulary,
    t_init: int,
    seed: int,
    max_samples: int = 128,
    batch_size: int = 128,
) -> float:
    """Mean sentence BLEU of one-step generations on (a prefix of) a split."""
    n = min(max_samples, enc.tokens.shape[0])
    gen = torch.Generator().manual_seed(seed)
    hyps: list[list[str]] = []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            tokens, cond_mask, _ = D.batch_tensors(enc, idx)
            z = torch.randn((len(idx), enc.L, generator.cfg.d), generator=gen)
            out = generate_one_step_batch(generator, sched, tokens, cond_mask, z, t_init)
            ids = round_to_tokens(out, generator)
            hyps.extend(D.decode_target_rows(ids, enc.cond_len[idx], vocab))
    return mean_sentence_bleu(hyps, enc.refs[:n])


def run_stage(
    cfg: DistillConfig,
    sched: NoiseSchedule,
    vocab: D.Vocabulary,
    teacher_net: DenoiserNetwork,
    train_enc: D.EncodedPairs,
    valid_enc: D.EncodedPairs,
    out_dir: str,
    stage1_generator: DenoiserNetwork | None = None,
    log=None,
) -> tuple[str, list[tuple[int, float]]]:
    """Run one distillation stage; returns (best checkpoint dir, validation history).

    Validation BLEU is evaluated at exact multiples of ``val_every`` (plus
    the final step when the budget is not a multiple); the checkpoint with
    the best validation BLEU is kept, earliest step winning ties.
    """
    cfg.check_against_schedule(sched)
    state = make_distill_state(teacher_net, cfg, init_generator=stage1_generator)
    rng = np.random.default_rng(cfg.seed + 17)
    torch_gen = torch.Generator().manual_seed(cfg.seed + 23)
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.txt")
    log_file = open(log_path, "w", encoding="utf-8")

    def emit(line: str) -> None:
        log_file.write(line + "\n")
        log_file.flush()
        if log is not None:
            log(line)

    n_train = train_enc.tokens.shape[0]
    best_bleu = -1.0
    best_step = -1
    best_params = None
    try:
        for _ in range(cfg.budget_steps):
            real_idx = rng.integers(0, n_train, size=cfg.batch_size)
            cond_idx_psi = rng.integers(0, n_train, size=cfg.batch_size)
            cond_idx_theta = rng.integers(0, n_train, size=cfg.batch_size)
            real_batch = D.batch_tensors(train_enc, real_idx)
            conds_psi = D.batch_tensors(train_enc, cond_idx_psi)[:2]
            conds_theta = D.batch_tensors(train_enc, cond_idx_theta)[:2]
            stats = distill_step(
                state, real_batch, conds_psi, conds_theta, cfg, sched, torch_gen
            )
            step = state.step
            if step % cfg.log_every == 0 or step == cfg.budget_steps:
                emit("step=%d " % step + " ".join(
                    f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}"
                    for k, v in sorted(stats.items())
                ))
            if step % cfg.val_every == 0 or step == cfg.budget_steps:
                with _ema_weights(state):
                    bleu = one_step_validation_bleu(
                        state.generator, sched, valid_enc, vocab, cfg.t_init,
                        seed=cfg.seed * 1000003 + step, max_samples=cfg.val_samples,
                    )
                state.val_history.append((step, bleu))
                emit(f"step={step} val_bleu={bleu:.6f}")
                if bleu > best_bleu:
                    best_bleu, best_step = bleu, step
                    with _ema_weights(state):
                        best_params = {
                            k: v.detach().clone() for k, v in state.generator.state_dict().items()
                        }
    finally:
        log_file.close()

    if best_params is None:  # budget shorter than the validation cadence
        best_params = {k: v.detach().clone() for k, v in state.generator.state_dict().items()}
        best_step = state.step
    best_dir = os.path.join(out_dir, "best")
    last_dir = os.path.join(out_dir, "last")
    best_net = DenoiserNetwork(state.generator.cfg, role="generator")
    best_net.load_state_dict(best_params)
    save_checkpoint(
        best_dir, best_net, sched.to_record(), vocab,
        step=best_step, val_history=state.val_history,
        extra={"stage": cfg.stage, "selected": "best_val_bleu"},
    )
    save_checkpoint(
        last_dir, state.generator, sched.to_record(), vocab,
        step=state.step, val_history=state.val_history,
        extra={"stage": cfg.stage, "selected": "last"},
    )
    return best_dir, state.val_history


def best_from_history(history: list[tuple[int, float]]) -> tuple[int, float]:
    """Argmax of validation history; ties resolved to the earliest step."""
    if not history:
        raise ValueError("empty validation history")
    best_step, best_val = history[0]
    for step, val in history[1:]:
        if val > best_val:
            best_step, best_val = step, val
    return best_step, best_val
