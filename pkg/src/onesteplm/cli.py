"""Command-line operator surface.

Subcommands: ``pretrain-teacher``, ``distill``, ``generate``, ``evaluate``,
``bench``, ``selftest``.  Runs are driven by an INI-style config file with
one section per module; distillation keys keep their standard names (mu,
t_min, t_max, t_init, a_sg_dsm, b_sg_adv, a_g_sd, b_g_adv, lr_psi,
lr_theta, stage).  Every run writes a ``manifest.json`` (config hash, seed,
code version, argv) next to its outputs so it can be re-run bit-identically
in deterministic mode.  The ``DLMONE_DEVICE`` environment variable selects
the compute device (default cpu).

Exit codes: 0 success, 2 usage error, 3 unreadable/invalid config,
4 missing checkpoint or input file, 1 other runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys

import numpy as np
import torch

from . import __version__
from . import data as D
from . import distill as DI
from . import metrics as ME
from . import sampler as SA
from . import seqmodel as SM
from . import teacher as TE
from .schedule import NoiseSchedule, build_schedule
from .selftest import run_selftest

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4


class ConfigError(Exception):
    pass


class MissingArtifactError(Exception):
    pass


def _device() -> str:
    return os.environ.get("DLMONE_DEVICE", "cpu")


def _read_config(path) -> configparser.ConfigParser:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as f:
            cp.read_file(f)
    except (configparser.Error, UnicodeDecodeError) as err:
        raise ConfigError(f"unreadable config {path}: {err}") from err
    return cp


def _section(cp: configparser.ConfigParser, name: str) -> dict:
    if not cp.has_section(name):
        raise ConfigError(f"config is missing the [{name}] section")
    return dict(cp.items(name))


def _manifest(out_dir, args, config_path=None, seed=None, extra=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": __version__,
        "torch": torch.__version__,
        "device": _device(),
        "seed": seed,
    }
    if config_path:
        with open(config_path, "rb") as f:
            record["config_sha256"] = hashlib.sha256(f.read()).hexdigest()
        record["config_path"] = os.path.abspath(config_path)
    if extra:
        record.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(record, f, indent=1)


def _schedule_from(cp) -> NoiseSchedule:
    sec = _section(cp, "schedule")
    try:
        return build_schedule(
            int(sec.get("t", sec.get("T", 2000))),
            sec.get("kind", "sqrt"),
            float(sec.get("s_offset", 1e-4)),
        )
    except ValueError as err:
        raise ConfigError(f"[schedule]: {err}") from err


def _model_cfg_from(cp, vocab_size: int) -> SM.ModelConfig:
    sec = _section(cp, "model")
    try:
        return SM.ModelConfig(
            vocab_size=vocab_size,
            d=int(sec.get("d", 128)),
            n_layers=int(sec.get("n_layers", 4)),
            n_heads=int(sec.get("n_heads", 4)),
            max_len=int(sec.get("max_len", 64)),
            width=int(sec["width"]) if "width" in sec else None,
        )
    except (ValueError, TypeError) as err:
        raise ConfigError(f"[model]: {err}") from err


def _corpora_from(cp):
    """Build (train, valid, test) corpora from files or a synthetic task."""
    sec = _section(cp, "data")
    if "train" in sec:
        for key in ("train", "valid", "test"):
            if key not in sec:
                raise ConfigError(f"[data]: file mode needs '{key}'")
            if not os.path.exists(sec[key]):
                raise MissingArtifactError(f"[data] {key} file not found: {sec[key]}")
        train = D.load_pairs(sec["train"], "train")
        valid = D.load_pairs(sec["valid"], "valid")
        test = D.load_pairs(sec["test"], "test")
        vocab = D.build_vocab(train, max_size=int(sec["vocab_size"]) if "vocab_size" in sec else None)
        for c in (train, valid, test):
            c.vocab = vocab
        return train, valid, test
    try:
        corpus = D.synth_task(
            kind=sec.get("kind", "reversal"),
            n=int(sec.get("n", 4000)),
            vocab_size=int(sec.get("vocab_size", 64)),
            len_range=(int(sec.get("len_min", 4)), int(sec.get("len_max", 12))),
            seed=int(sec.get("seed", 0)),
        )
        return D.split_corpus(
            corpus, int(sec.get("n_valid", 200)), int(sec.get("n_test", 200)),
            seed=int(sec.get("seed", 0)) + 1,
        )
    except ValueError as err:
        raise ConfigError(f"[data]: {err}") from err


def _teacher_cfg_from(cp) -> TE.TeacherConfig:
    sec = _section(cp, "teacher")
    try:
        return TE.TeacherConfig(
            steps=int(sec.get("steps", 8000)),
            batch_size=int(sec.get("batch_size", 32)),
            lr=float(sec.get("lr", 1e-4)),
            rounding_coeff=float(sec.get("rounding_coeff", 0.1)),
            grad_clip=float(sec.get("grad_clip", 1.0)),
            val_every=int(sec.get("val_every", 1000)),
            seed=int(sec.get("seed", 0)),
            device=_device(),
        )
    except (ValueError, TypeError) as err:
        raise ConfigError(f"[teacher]: {err}") from err


def _distill_cfg_from(cp, stage: int) -> DI.DistillConfig:
    sec = dict(_section(cp, "distill"))
    override = f"distill.stage{stage}"
    if cp.has_section(override):
        sec.update(dict(cp.items(override)))
    try:
        return DI.DistillConfig(
            mu=float(sec.get("mu", 1.2)),
            t_min=int(sec.get("t_min", 0)),
            t_max=int(sec.get("t_max", 1976)),
            t_init=int(sec.get("t_init", 1490)),
            a_sg_dsm=float(sec.get("a_sg_dsm", 0.5)),
            b_sg_adv=float(sec.get("b_sg_adv", 0.5)),
            a_g_sd=float(sec.get("a_g_sd", 0.5)),
            b_g_adv=float(sec.get("b_g_adv", 0.5)),
            lr_psi=float(sec.get("lr_psi", 3e-5)),
            lr_theta=float(sec.get("lr_theta", 1e-5)),
            stage=stage,
            budget_steps=int(sec.get("budget_steps", 50000)),
            val_every=int(sec.get("val_every", 200)),
            weight_mode=sec.get("weight_mode", "sid-adaptive"),
            gamma_mode=sec.get("gamma_mode", "constant-1"),
            batch_size=int(sec.get("batch_size", 32)),
            seed=int(sec.get("seed", 0)),
            disc_t_mode=sec.get("disc_t_mode", "shared"),
            use_ema=sec.get("use_ema", "false").lower() in ("1", "true", "yes"),
            ema_decay=float(sec.get("ema_decay", 0.999)),
            val_samples=int(sec.get("val_samples", 128)),
            device=_device(),
        )
    except (ValueError, TypeError) as err:
        raise ConfigError(f"[distill]: {err}") from err


def _load_bundle(path, role=None) -> SM.CheckpointBundle:
    try:
        return SM.load_checkpoint(path, role=role, device=_device())
    except FileNotFoundError as err:
        raise MissingArtifactError(str(err)) from err


def cmd_pretrain_teacher(args) -> int:
    cp = _read_config(args.config)
    sched = _schedule_from(cp)
    train, valid, _ = _corpora_from(cp)
    vocab = train.vocab
    model_cfg = _model_cfg_from(cp, vocab_size=len(vocab))
    tcfg = _teacher_cfg_from(cp)
    L = model_cfg.max_len
    train_enc = D.encode_corpus(train, vocab, L)
    valid_enc = D.encode_corpus(valid, vocab, L)
    _manifest(args.out, args, args.config, seed=tcfg.seed)
    log_path = os.path.join(args.out, "train_log.txt")
    with open(log_path, "w", encoding="utf-8") as log_file:

        def log(line):
            log_file.write(line + "\n")
            log_file.flush()
            print(line)

        net, history = TE.pretrain_teacher(train_enc, valid_enc, model_cfg, sched, tcfg, log=log)
    SM.save_checkpoint(
        args.out, net, sched.to_record(), vocab,
        step=tcfg.steps, val_history=history, extra={"kind": "teacher"},
    )
    print(f"teacher checkpoint written to {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cp = _read_config(args.config)
    sched = _schedule_from(cp)
    dcfg = _distill_cfg_from(cp, stage=args.stage)
    teacher_bundle = _load_bundle(args.teacher, role="teacher")
    vocab = teacher_bundle.vocab
    train, valid, _ = _corpora_from(cp)
    L = teacher_bundle.net.cfg.max_len
    train_enc = D.encode_corpus(train, vocab, L)
    valid_enc = D.encode_corpus(valid, vocab, L)
    stage1_net = None
    if args.stage == 2:
        if not args.stage1:
            raise MissingArtifactError("distill --stage 2 requires --stage1 <best stage-1 checkpoint>")
        stage1_net = _load_bundle(args.stage1, role="generator").net
    _manifest(args.out, args, args.config, seed=dcfg.seed, extra={"stage": args.stage})
    best_dir, history = DI.run_stage(
        dcfg, sched, vocab, teacher_bundle.net, train_enc, valid_enc,
        args.out, stage1_generator=stage1_net, log=print,
    )
    step, val = DI.best_from_history(history) if history else (0, float("nan"))
    print(f"best checkpoint: {best_dir} (step {step}, val_bleu {val:.4f})")
    return EXIT_OK


def _read_prompts(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"prompts file not found: {path}")
    prompts = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            if "src" not in row:
                raise ConfigError(f"{path}:{lineno}: prompt line needs a 'src' field")
            prompts.append((D.tokenize(str(row["src"])), D.tokenize(str(row.get("ref", ""))) or None))
    if not prompts:
        raise MissingArtifactError(f"{path}: no prompts")
    return prompts


def cmd_generate(args) -> int:
    bundle = _load_bundle(args.checkpoint, role="generator")
    net, vocab = bundle.net, bundle.vocab
    sched = NoiseSchedule.from_record(bundle.schedule_record)
    t_init = args.t_init if args.t_init is not None else int(bundle.extra.get("t_init", 1490))
    prompts = _read_prompts(args.prompts)
    gen = torch.Generator().manual_seed(args.seed)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _manifest(out_dir, args, seed=args.seed, extra={"steps": args.steps, "mbr": args.mbr})
    net.reset_nfe()
    results = []
    src_ids = [vocab.encode(src) for src, _ in prompts]
    for (src_words, ref), ids in zip(prompts, src_ids):
        cands = []
        for _ in range(max(1, args.mbr)):
            trg_ids = SA.multi_step_generate(net, sched, ids, args.steps, gen, t_init)
            cands.append(vocab.decode(trg_ids))
        hyp = SA.mbr_select(cands) if args.mbr > 1 else cands[0]
        row = {"src": " ".join(src_words), "hyp": " ".join(hyp)}
        if ref:
            row["ref"] = " ".join(ref)
        results.append(row)
    with open(args.out, "w", encoding="utf-8") as f:
        for row in results:
            f.write(json.dumps(row) + "\n")
    print(f"wrote {len(results)} generations to {args.out} (NFEs={net.nfe_count})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not os.path.exists(args.generations):
        raise MissingArtifactError(f"generations file not found: {args.generations}")
    hyps, refs = [], []
    with open(args.generations, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            if "hyp" not in row:
                raise ConfigError(f"{args.generations}:{lineno}: line needs a 'hyp' field")
            hyps.append(D.tokenize(str(row["hyp"])))
            refs.append(D.tokenize(str(row["ref"])) if "ref" in row else None)
    paired = [(h, r) for h, r in zip(hyps, refs) if r is not None]
    report = ME.MetricsReport(
        dist1=ME.dist1(hyps),
        self_bleu=ME.self_bleu(hyps) if len(hyps) > 1 else 0.0,
        div4=ME.div4(hyps),
        meta={"generations": os.path.abspath(args.generations), "n": len(hyps)},
    )
    if paired:
        report.bleu = ME.mean_sentence_bleu([h for h, _ in paired], [r for _, r in paired])
        report.rouge_l = sum(ME.rouge_l(h, r) for h, r in paired) / len(paired)
    if args.semantic_checkpoint:
        bundle = _load_bundle(args.semantic_checkpoint)
        scorer = ME.EmbeddingCosineScorer(
            bundle.net.embedding.weight.detach().cpu().numpy(), bundle.vocab
        )
        if paired:
            report.semantic = ME.semantic_score(
                [h for h, _ in paired], [r for _, r in paired], scorer
            )
    text = report.to_text()
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)
    json_path = os.path.splitext(args.out)[0] + ".json"
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=1)
    _manifest(os.path.dirname(os.path.abspath(args.out)) or ".", args, seed=None)
    print(text, end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    bundle = _load_bundle(args.checkpoint, role="generator")
    sched = NoiseSchedule.from_record(bundle.schedule_record)
    prompts = _read_prompts(args.prompts)[: args.batch]
    src_ids = [bundle.vocab.encode(src) for src, _ in prompts]
    steps_list = [int(s) for s in args.steps.split(",")]
    t_init = args.t_init if args.t_init is not None else int(bundle.extra.get("t_init", 1490))
    report = SA.benchmark_latency(
        bundle.net, sched, bundle.vocab, src_ids, steps_list,
        repeats=args.repeats, t_init=t_init, seed=args.seed,
    )
    text = report.to_text()
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)
    _manifest(os.path.dirname(os.path.abspath(args.out)) or ".", args, seed=args.seed)
    print(text, end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    ok = run_selftest(emit=print)
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onesteplm",
        description="Train, distill, sample, and evaluate embedding-space diffusion sequence models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-teacher", help="train a teacher denoiser from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain_teacher)

    p = sub.add_parser("distill", help="distill the teacher into a one-step generator")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p.add_argument("--stage1", help="best stage-1 checkpoint (required for --stage 2)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("generate", help="generate target sequences for a prompts file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompts", required=True, help='JSONL with {"src": ..., "ref"?: ...}')
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--mbr", type=int, default=1, help="candidates for minimum-Bayes-risk selection")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-init", dest="t_init", type=int, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="score a generations file")
    p.add_argument("--generations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--semantic-checkpoint", help="enable the embedding-cosine semantic scorer")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("bench", help="latency benchmark across step counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", default="1,65,286,667,1000,2000")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-init", dest="t_init", type=int, default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("selftest", help="run the analytic oracle suite")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code) if err.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as err:
        print(f"missing artifact: {err}", file=sys.stderr)
        return EXIT_MISSING
    except (RuntimeError, ValueError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
