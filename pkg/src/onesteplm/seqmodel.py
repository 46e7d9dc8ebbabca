"""Transformer denoiser over continuous token embeddings.

One architecture serves three roles: the pretrained teacher, the one-step
student generator, and the student-score estimator (which additionally
carries a discriminator head).  The trunk is an encoder-only transformer
with bidirectional attention, learned positional embeddings, and a
sinusoidal-then-learned time embedding added to every position.  The
embedding matrix is trained only during teacher pretraining and is frozen
(and shared bit-exactly across roles) during distillation.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PAD_ID, SEP_ID, Vocabulary

ROLE_TEACHER = "teacher"
ROLE_GENERATOR = "generator"
ROLE_ESTIMATOR = "estimator"
ROLES = (ROLE_TEACHER, ROLE_GENERATOR, ROLE_ESTIMATOR)


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 128  # embedding dimension
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 64
    width: int | None = None  # trunk hidden size; defaults to d

    def __post_init__(self):
        if self.width is None:
            self.width = self.d
        if self.width % self.n_heads != 0:
            raise ValueError(f"width={self.width} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d": self.d,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_len": self.max_len,
            "width": self.width,
        }

    @staticmethod
    def from_dict(record: dict) -> "ModelConfig":
        return ModelConfig(**record)


@dataclass
class EmbeddedSequence:
    """A batch of length-L embedding matrices with condition and pad masks.

    ``values`` is (B, L, d); ``cond_mask`` marks prompt positions (src plus
    separator), ``pad_mask`` marks declared padding.  Target content is
    everything that is neither.
    """

    values: torch.Tensor
    cond_mask: torch.Tensor
    pad_mask: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ValueError(f"values must be (B, L, d), got {tuple(self.values.shape)}")
        b, l, _ = self.values.shape
        for name, mask in (("cond_mask", self.cond_mask), ("pad_mask", self.pad_mask)):
            if mask.shape != (b, l):
                raise ValueError(f"{name} shape {tuple(mask.shape)} != ({b}, {l})")
            if mask.dtype != torch.bool:
                raise ValueError(f"{name} must be a boolean mask")
        if bool((self.cond_mask & self.pad_mask).any()):
            raise ValueError("a position cannot be both condition and pad")

    @property
    def target_mask(self) -> torch.Tensor:
        return ~(self.cond_mask | self.pad_mask)

    def clone(self) -> "EmbeddedSequence":
        return EmbeddedSequence(
            self.values.clone(), self.cond_mask.clone(), self.pad_mask.clone()
        )


def sinusoidal_features(t: torch.Tensor, dim: int, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    angles = t.float().unsqueeze(-1) * freqs
    feats = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        feats = F.pad(feats, (0, 1))
    return feats


class TransformerBlock(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
        b, l, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        shape = (b, l, self.n_heads, self.head_dim)
        q, k, v = (z.view(shape).transpose(1, 2) for z in (q, k, v))
        attn_mask = None
        if key_mask is not None:
            # boolean SDPA mask: True = key may be attended to
            attn_mask = key_mask[:, None, None, :]
        h = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        h = h.transpose(1, 2).reshape(b, l, d)
        x = x + self.proj(h)
        return x + self.mlp(self.ln2(x))


class DenoiserNetwork(nn.Module):
    """Posterior-mean denoiser ``e_hat = net(e_t, t)`` with optional heads.

    The lm-head is tied to the embedding matrix transpose; the discriminator
    head (estimator role only) mean-pools final hidden states over non-pad
    positions into a single logit.  ``nfe_count`` counts denoiser forward
    passes for inference accounting.
    """

    def __init__(self, cfg: ModelConfig, role: str = ROLE_TEACHER):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.cfg = cfg
        self.role = role
        width = cfg.width
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.d)
        self.in_proj = nn.Linear(cfg.d, width)
        self.pos_emb = nn.Parameter(torch.zeros(1, cfg.max_len, width))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.time_mlp = nn.Sequential(
            nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width)
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(width, cfg.n_heads) for _ in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, cfg.d)
        self.disc_head = nn.Linear(width, 1) if role == ROLE_ESTIMATOR else None
        self.nfe_count = 0

    def _time_tensor(self, t, batch: int, device) -> torch.Tensor:
        if torch.is_tensor(t):
            t = t.to(device)
            return t.expand(batch) if t.dim() == 0 else t
        return torch.full((batch,), int(t), device=device)

    def trunk(self, e_t: EmbeddedSequence, t) -> torch.Tensor:
        values = e_t.values
        b, l, _ = values.shape
        if l > self.cfg.max_len:
            raise ValueError(f"sequence length {l} exceeds max_len {self.cfg.max_len}")
        tvec = self._time_tensor(t, b, values.device)
        time_emb = self.time_mlp(sinusoidal_features(tvec, self.cfg.width))
        h = self.in_proj(values) + self.pos_emb[:, :l] + time_emb.unsqueeze(1)
        key_mask = None
        if bool(e_t.pad_mask.any()):
            key_mask = ~e_t.pad_mask
            if not bool(key_mask.any(dim=1).all()):
                raise ValueError("a sequence with every position padded cannot be attended")
        for block in self.blocks:
            h = block(h, key_mask)
        return self.ln_f(h)

    def denoise(self, e_t: EmbeddedSequence, t) -> torch.Tensor:
        """Predict the clean embedding (B, L, d); increments the NFE counter."""
        self.nfe_count += 1
        return self.out_proj(self.trunk(e_t, t))

    def logits(self, e_hat: torch.Tensor) -> torch.Tensor:
        """Vocabulary logits from predicted embeddings via the tied lm-head."""
        return e_hat @ self.embedding.weight.t()

    def discriminate(self, e_t: EmbeddedSequence, t) -> torch.Tensor:
        """One real/fake logit per sequence from pooled trunk states."""
        if self.disc_head is None:
            raise ValueError(f"role {self.role!r} has no discriminator head")
        h = self.trunk(e_t, t)
        keep = (~e_t.pad_mask).unsqueeze(-1).to(h.dtype)
        pooled = (h * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        return self.disc_head(pooled).squeeze(-1)

    def reset_nfe(self) -> None:
        self.nfe_count = 0

    def clone_as(self, role: str) -> "DenoiserNetwork":
        """Exact parameter copy in a new role; estimator gets a fresh disc head."""
        net = copy.deepcopy(self)
        net.role = role
        net.nfe_count = 0
        if role == ROLE_ESTIMATOR:
            net.disc_head = nn.Linear(self.cfg.width, 1)
        elif net.disc_head is not None:
            net.disc_head = None
        return net

    def freeze_embedding(self) -> None:
        self.embedding.weight.requires_grad_(False)

    def embedding_sha256(self) -> str:
        blob = self.embedding.weight.detach().cpu().to(torch.float32).numpy().tobytes()
        return hashlib.sha256(blob).hexdigest()

    def check_embedding_separation(self) -> float:
        """Assert finite, non-collapsed embedding rows; returns the min pairwise distance."""
        E = self.embedding.weight.detach().cpu().to(torch.float64)
        if not bool(torch.isfinite(E).all()):
            raise ValueError("embedding matrix contains non-finite values")
        d2 = torch.cdist(E, E)
        d2.fill_diagonal_(float("inf"))
        gap = float(d2.min())
        if not gap > 0.0:
            raise ValueError("embedding rows have collapsed (zero pairwise distance)")
        return gap


def embed(net: DenoiserNetwork, src_ids, trg_ids, pad_to: int | None = None) -> EmbeddedSequence:
    """Embed one (src, trg) id pair as ``src + [SEP] + trg`` padded to L.

    The filled tail is declared in ``pad_mask``; the condition mask covers
    the source and its separator.
    """
    L = pad_to if pad_to is not None else net.cfg.max_len
    src_ids, trg_ids = list(map(int, src_ids)), list(map(int, trg_ids))
    row = src_ids + [SEP_ID] + trg_ids
    for tok in row:
        if not 0 <= tok < net.cfg.vocab_size:
            raise ValueError(f"token id {tok} outside vocabulary of size {net.cfg.vocab_size}")
    if len(row) > L:
        raise ValueError(f"sequence length {len(row)} exceeds L={L}")
    tokens = torch.full((1, L), PAD_ID, dtype=torch.long)
    tokens[0, : len(row)] = torch.tensor(row, dtype=torch.long)
    cond_mask = torch.zeros(1, L, dtype=torch.bool)
    cond_mask[0, : len(src_ids) + 1] = True
    pad_mask = torch.zeros(1, L, dtype=torch.bool)
    pad_mask[0, len(row) :] = True
    return embed_tokens(net, tokens, cond_mask, pad_mask)


def embed_tokens(net, tokens: torch.Tensor, cond_mask, pad_mask) -> EmbeddedSequence:
    """Table-lookup embedding of a prepared (B, L) token-id batch."""
    if int(tokens.max()) >= net.cfg.vocab_size or int(tokens.min()) < 0:
        raise ValueError("token id outside vocabulary")
    device = net.embedding.weight.device
    return EmbeddedSequence(
        values=net.embedding(tokens.to(device)),
        cond_mask=cond_mask.to(device),
        pad_mask=pad_mask.to(device),
    )


def round_to_tokens(e: EmbeddedSequence, net: DenoiserNetwork) -> torch.Tensor:
    """Nearest-row token ids, ties broken by the smallest id.

    Distances are evaluated in float64 with an explicit squared difference
    (rather than the dot-product expansion) so exact ties stay exact.
    """
    if not bool(torch.isfinite(e.values).all()):
        raise ValueError("cannot round non-finite embedding values")
    E = net.embedding.weight.detach().to(torch.float64)
    b, l, d = e.values.shape
    flat = e.values.detach().to(torch.float64).reshape(b * l, 1, d)
    out = torch.empty(b * l, dtype=torch.long)
    chunk = max(1, (1 << 22) // max(1, E.shape[0] * d))
    for start in range(0, flat.shape[0], chunk):
        diff = flat[start : start + chunk] - E.unsqueeze(0)
        out[start : start + chunk] = diff.pow(2).sum(-1).argmin(dim=-1)
    return out.reshape(b, l)


CKPT_PARAMS = "params.pt"
CKPT_CONFIG = "config.json"
CKPT_SCHEDULE = "schedule.json"
CKPT_VOCAB = "vocab.txt"
CKPT_STATE = "state.json"


@dataclass
class CheckpointBundle:
    net: DenoiserNetwork
    schedule_record: dict
    vocab: Vocabulary
    step: int = 0
    val_history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path,
    net: DenoiserNetwork,
    schedule_record: dict,
    vocab: Vocabulary,
    step: int = 0,
    val_history=(),
    extra: dict | None = None,
) -> None:
    """Write the checkpoint directory layout.

    Contents: parameter blob, model config record, schedule construction
    record (coefficients are recomputed at load), newline-delimited
    vocabulary (id = line number), step counter and validation history.
    """
    os.makedirs(path, exist_ok=True)
    torch.save({"state_dict": net.state_dict(), "role": net.role}, os.path.join(path, CKPT_PARAMS))
    with open(os.path.join(path, CKPT_CONFIG), "w", encoding="utf-8") as f:
        json.dump(net.cfg.to_dict(), f, indent=1)
    with open(os.path.join(path, CKPT_SCHEDULE), "w", encoding="utf-8") as f:
        json.dump(schedule_record, f, indent=1)
    vocab.save(os.path.join(path, CKPT_VOCAB))
    state = {
        "step": int(step),
        "val_history": [[int(s), float(v)] for s, v in val_history],
        "extra": extra or {},
    }
    with open(os.path.join(path, CKPT_STATE), "w", encoding="utf-8") as f:
        json.dump(state, f, indent=1)


def load_checkpoint(path, role: str | None = None, device="cpu") -> CheckpointBundle:
    params_path = os.path.join(path, CKPT_PARAMS)
    if not os.path.isdir(path) or not os.path.exists(params_path):
        raise FileNotFoundError(f"no checkpoint at {path}")
    blob = torch.load(params_path, map_location=device, weights_only=True)
    with open(os.path.join(path, CKPT_CONFIG), encoding="utf-8") as f:
        cfg = ModelConfig.from_dict(json.load(f))
    with open(os.path.join(path, CKPT_SCHEDULE), encoding="utf-8") as f:
        schedule_record = json.load(f)
    vocab = Vocabulary.load(os.path.join(path, CKPT_VOCAB))
    with open(os.path.join(path, CKPT_STATE), encoding="utf-8") as f:
        state = json.load(f)
    net = DenoiserNetwork(cfg, role=role or blob["role"])
    if net.disc_head is not None and not any(
        k.startswith("disc_head.") for k in blob["state_dict"]
    ):
        # estimator restored from a headless checkpoint keeps its fresh head
        missing = net.load_state_dict(blob["state_dict"], strict=False)
        assert all(k.startswith("disc_head.") for k in missing.missing_keys)
    else:
        wanted = blob["state_dict"]
        if net.disc_head is None:
            wanted = {k: v for k, v in wanted.items() if not k.startswith("disc_head.")}
        net.load_state_dict(wanted)
    net = net.to(device)
    net.check_embedding_separation()
    return CheckpointBundle(
        net=net,
        schedule_record=schedule_record,
        vocab=vocab,
        step=int(state.get("step", 0)),
        val_history=[(int(s), float(v)) for s, v in state.get("val_history", [])],
        extra=state.get("extra", {}),
    )
