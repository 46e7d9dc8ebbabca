"""One-step sequence generation from embedding-space diffusion language models.

A pretrained iterative denoiser (the teacher) is distilled into a student
that generates whole sequences in a single forward pass, by matching the
score of the student's outputs to the teacher's score in the noised
embedding space, stabilized with an adversarial term and a two-stage
schedule.  The package also ships the toy-scale teacher trainer, iterative
and multi-step samplers, minimum-Bayes-risk decoding, the evaluation
metrics, and a latency benchmark.
"""

__version__ = "0.1.0"

from .schedule import (  # noqa: F401
    GaussianWorld,
    NoiseSchedule,
    build_schedule,
    forward_diffuse,
    gaussian_posterior_mean,
    gaussian_score,
    score_from_denoiser,
)
from .seqmodel import (  # noqa: F401
    DenoiserNetwork,
    EmbeddedSequence,
    ModelConfig,
    embed,
    load_checkpoint,
    round_to_tokens,
    save_checkpoint,
)
from .distill import (  # noqa: F401
    DistillConfig,
    DistillState,
    disc_loss,
    distill_step,
    dsm_loss,
    gen_adv_loss,
    generate_one_step,
    guided_teacher_denoise,
    replace_condition,
    run_stage,
    sid_loss,
)
from .sampler import benchmark_latency, mbr_select, multi_step_generate  # noqa: F401
from .teacher import pretrain_teacher, teacher_sample  # noqa: F401
