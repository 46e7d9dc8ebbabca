"""Discrete-time noise schedules and the partially-noising forward process.

The forward process acts on continuous token embeddings: at time t a clean
embedding e becomes ``e_t = alpha[t] * e + sigma[t] * eps`` with
``eps ~ N(0, I)``.  Only target positions are noised; condition (prompt)
positions pass through untouched.  All schedules are variance preserving,
``alpha[t]**2 + sigma[t]**2 == 1``, so pure-noise inputs at large t are
unit-scaled.

Also provided: the denoiser <-> score conversions and a closed-form
isotropic-Gaussian world used as an analytic oracle by the test suite and
the ``selftest`` CLI command.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch

if TYPE_CHECKING:
    from .seqmodel import EmbeddedSequence

SCHEDULE_KINDS = ("sqrt", "linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-step diffusion coefficients.

    ``alpha`` and ``sigma`` are float64 arrays of length ``T`` with
    ``alpha[t]**2 + sigma[t]**2 == 1`` and strictly decreasing
    signal-to-noise ratio ``alpha/sigma``.  Instances are safe to share
    across workers; coefficient arrays are always recomputed from
    ``(T, kind, s_offset)`` when checkpoints are loaded, never stored.
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    kind: str
    s_offset: float

    def snr(self) -> np.ndarray:
        """Signal-to-noise ratio alpha/sigma at every step."""
        return self.alpha / self.sigma

    def to_record(self) -> dict:
        """Serializable construction record (coefficients are recomputed)."""
        return {"T": self.T, "kind": self.kind, "s_offset": self.s_offset}

    @staticmethod
    def from_record(record: dict) -> "NoiseSchedule":
        return build_schedule(
            int(record["T"]), record["kind"], float(record["s_offset"])
        )


def _alpha_bar(T: int, kind: str, s: float) -> np.ndarray:
    t = np.arange(T, dtype=np.float64)
    if kind == "sqrt":
        return 1.0 - np.sqrt(t / T + s)
    if kind == "linear":
        # linear decay of retained signal; s keeps both endpoints nondegenerate
        return (1.0 - s) - (t / T) * (1.0 - 2.0 * s)
    if kind == "cosine":
        return np.cos((t / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
    raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


def build_schedule(T: int, kind: str = "sqrt", s_offset: float = 1e-4) -> NoiseSchedule:
    """Construct a variance-preserving schedule of ``T`` integer steps.

    For ``kind='sqrt'`` the retained-signal fraction is
    ``abar[t] = 1 - sqrt(t/T + s_offset)`` with ``alpha = sqrt(abar)`` and
    ``sigma = sqrt(1 - abar)``.  ``s_offset`` keeps ``abar[0] < 1`` so the
    t=0 regression problem is nondegenerate.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < s_offset < 0.1):
        raise ValueError(f"s_offset must lie in (0, 0.1), got {s_offset}")
    abar = _alpha_bar(T, kind, s_offset)
    if not (np.all(abar > 0.0) and np.all(abar < 1.0)):
        raise ValueError(f"schedule {kind!r} with T={T}, s_offset={s_offset} degenerates")
    alpha = np.sqrt(abar)
    sigma = np.sqrt(1.0 - abar)
    sched = NoiseSchedule(T=T, alpha=alpha, sigma=sigma, kind=kind, s_offset=s_offset)
    _check_invariants(sched)
    return sched


def _check_invariants(sched: NoiseSchedule) -> None:
    vp = sched.alpha**2 + sched.sigma**2
    if not np.all(np.abs(vp - 1.0) < 1e-12):
        raise AssertionError("schedule is not variance preserving")
    if not np.all(np.diff(sched.snr()) < 0.0):
        raise AssertionError("signal-to-noise ratio is not strictly decreasing")
    if not sched.alpha[0] > 0.99 * sched.alpha.max():
        raise AssertionError("schedule does not start near-clean")
    if not sched.sigma[-1] > 0.99:
        raise AssertionError("schedule does not end near pure noise")


def _check_t(t: int, sched: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < sched.T:
        raise ValueError(f"time index {t} outside [0, {sched.T - 1}]")
    return t


def forward_diffuse(
    e: "EmbeddedSequence", t, sched: NoiseSchedule, noise
) -> "EmbeddedSequence":
    """Noise target positions of ``e`` to time ``t``; conditions pass through.

    ``noise`` is an explicit standard-normal draw of the same shape as
    ``e.values`` (callers own all randomness, so the op is pure).  Output at
    condition positions is bit-identical to the input.
    """
    t = _check_t(t, sched)
    if tuple(noise.shape) != tuple(e.values.shape):
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != values shape {tuple(e.values.shape)}"
        )
    a = float(sched.alpha[t])
    s = float(sched.sigma[t])
    noised = a * e.values + s * noise
    keep = e.cond_mask.unsqueeze(-1)
    return dataclasses.replace(e, values=torch.where(keep, e.values, noised))


def score_from_denoiser(e_hat, e_t, t, sched: NoiseSchedule):
    """Convert a posterior-mean prediction into the score at ``e_t``.

    ``score = (alpha[t] * e_hat - e_t) / sigma[t]**2``; invertible via
    ``e_hat = (e_t + sigma[t]**2 * score) / alpha[t]``.
    """
    t = _check_t(t, sched)
    s2 = float(sched.sigma[t]) ** 2
    if s2 == 0.0:
        raise ValueError(f"sigma[{t}] = 0: score conversion undefined")
    return (float(sched.alpha[t]) * e_hat - e_t) / s2


def denoiser_from_score(score, e_t, t, sched: NoiseSchedule):
    """Inverse of :func:`score_from_denoiser`."""
    t = _check_t(t, sched)
    a = float(sched.alpha[t])
    return (e_t + float(sched.sigma[t]) ** 2 * score) / a


@dataclass(frozen=True)
class GaussianWorld:
    """Isotropic Gaussian data distribution N(mean, scale**2 I).

    Everything about its diffusion is available in closed form, which makes
    it the independent oracle for denoising, score conversion, and the
    distillation losses.
    """

    mean: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.scale * rng.standard_normal(shape)

    def marginal_var(self, t: int, sched: NoiseSchedule) -> float:
        """Per-coordinate variance of e_t = alpha*e + sigma*eps."""
        a = float(sched.alpha[t])
        s = float(sched.sigma[t])
        return a * a * self.scale**2 + s * s


def gaussian_posterior_mean(world: GaussianWorld, e_t, t, sched: NoiseSchedule):
    """Exact conditional expectation E[e | e_t] for Gaussian data.

    ``(sigma**2 * m + alpha * scale**2 * e_t) / (alpha**2 * scale**2 + sigma**2)``,
    the conjugate-Gaussian shrinkage of the noisy observation toward the mean.
    """
    t = _check_t(t, sched)
    a = float(sched.alpha[t])
    s2 = float(sched.sigma[t]) ** 2
    v = world.scale**2
    return (s2 * world.mean + a * v * e_t) / (a * a * v + s2)


def gaussian_score(world: GaussianWorld, e_t, t, sched: NoiseSchedule):
    """Analytic score of the noised marginal N(alpha*m, (alpha**2 s**2 + sigma**2) I)."""
    t = _check_t(t, sched)
    a = float(sched.alpha[t])
    return -(e_t - a * world.mean) / world.marginal_var(t, sched)
