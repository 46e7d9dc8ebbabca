"""Evaluation metrics for generated token sequences.

All metrics operate on token lists (the model's own token stream; no
external detokenizer) and return values in [0, 1].  The BLEU variant is
pinned here and frozen by golden tests: sentence BLEU up to 4-grams with a
brevity penalty, unsmoothed unigram precision, and add-1 smoothing on the
higher-order precisions.  ROUGE-L is the LCS F-measure with beta = 1.2
(mildly favoring recall).
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

Tokens = Sequence[str]

BLEU_MAX_N = 4
ROUGE_BETA = 1.2


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu_multi(hyp: Tokens, refs: Sequence[Tokens], max_n: int = BLEU_MAX_N) -> float:
    """Sentence BLEU of ``hyp`` against one or more references.

    Counts are clipped against the per-n-gram maximum over references and
    the brevity penalty uses the closest reference length.
    """
    if not refs:
        raise ValueError("need at least one reference")
    if len(hyp) == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        hyp_counts = ngram_counts(hyp, n)
        clip: Counter = Counter()
        for ref in refs:
            ref_counts = ngram_counts(ref, n)
            for g in hyp_counts:
                clip[g] = max(clip[g], min(hyp_counts[g], ref_counts[g]))
        matched = sum(clip.values())
        total = sum(hyp_counts.values())
        if n == 1:
            if matched == 0:
                return 0.0
            p = matched / total
        else:
            # add-1 smoothing keeps higher orders finite on short sequences
            p = (matched + 1) / (total + 1)
        log_sum += math.log(p)
    hyp_len = len(hyp)
    ref_len = min((len(r) for r in refs), key=lambda rl: (abs(rl - hyp_len), rl))
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum / max_n)


def bleu(hypothesis: Tokens, reference: Tokens) -> float:
    """Single-reference sentence BLEU (see module docstring for the variant)."""
    return _bleu_multi(hypothesis, [reference])


def corpus_bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Pooled-count corpus BLEU over aligned hypothesis/reference lists."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references must align")
    if not hypotheses:
        raise ValueError("empty corpus")
    matched = [0] * BLEU_MAX_N
    total = [0] * BLEU_MAX_N
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, BLEU_MAX_N + 1):
            h = ngram_counts(hyp, n)
            r = ngram_counts(ref, n)
            matched[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += sum(h.values())
    if hyp_len == 0 or matched[0] == 0:
        return 0.0
    log_sum = math.log(matched[0] / total[0])
    for n in range(2, BLEU_MAX_N + 1):
        log_sum += math.log((matched[n - 1] + 1) / (total[n - 1] + 1))
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum / BLEU_MAX_N)


def mean_sentence_bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    if len(hypotheses) != len(references) or not hypotheses:
        raise ValueError("need aligned, nonempty hypothesis/reference lists")
    return sum(bleu(h, r) for h, r in zip(hypotheses, references)) / len(hypotheses)


def _lcs_len(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: Tokens, reference: Tokens) -> float:
    """Longest-common-subsequence F-measure with beta = 1.2."""
    if not hypothesis or not reference:
        return 0.0
    lcs = _lcs_len(hypothesis, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hypothesis)
    recall = lcs / len(reference)
    b2 = ROUGE_BETA**2
    return (1 + b2) * precision * recall / (recall + b2 * precision)


def dist1(hypotheses: Sequence[Tokens]) -> float:
    """Mean per-sentence ratio of distinct unigrams to tokens."""
    if not hypotheses:
        raise ValueError("empty hypothesis set")
    ratios = [len(set(h)) / len(h) if h else 0.0 for h in hypotheses]
    return sum(ratios) / len(ratios)


def self_bleu(hypotheses: Sequence[Tokens]) -> float:
    """Mean BLEU of each hypothesis against the rest as references (lower = more diverse)."""
    if not hypotheses:
        raise ValueError("empty hypothesis set")
    if len(hypotheses) == 1:
        return 0.0
    scores = []
    for i, hyp in enumerate(hypotheses):
        refs = [h for j, h in enumerate(hypotheses) if j != i]
        scores.append(_bleu_multi(hyp, refs))
    return sum(scores) / len(scores)


def div4(hypotheses: Sequence[Tokens]) -> float:
    """Distinct 4-grams over total 4-grams, pooled over the set (higher = more diverse)."""
    if not hypotheses:
        raise ValueError("empty hypothesis set")
    pool: Counter = Counter()
    for h in hypotheses:
        pool.update(ngram_counts(h, 4))
    total = sum(pool.values())
    if total == 0:
        warnings.warn("no 4-grams in hypothesis set; div4 defined as 0", stacklevel=2)
        return 0.0
    return len(pool) / total


class SemanticScorer(Protocol):
    def score(self, hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float: ...


class EmbeddingCosineScorer:
    """Fallback semantic scorer: greedy cosine matching over an embedding table.

    For each pair, hypothesis tokens greedily claim the best-matching unused
    reference token by embedding cosine (and symmetrically for recall); the
    pair score is the harmonic mean of the two directions, averaged over the
    corpus.  Not BERTScore; a self-contained stand-in with the same shape.
    """

    def __init__(self, embedding_matrix, vocab):
        import numpy as np

        E = np.asarray(embedding_matrix, dtype=np.float64)
        norms = np.linalg.norm(E, axis=1, keepdims=True)
        self._unit = E / np.clip(norms, 1e-12, None)
        self._vocab = vocab

    def _greedy(self, a_ids, b_ids) -> float:
        if not a_ids or not b_ids:
            return 0.0
        sims = self._unit[a_ids] @ self._unit[b_ids].T
        used: set[int] = set()
        total = 0.0
        for i in range(len(a_ids)):
            free = [j for j in range(len(b_ids)) if j not in used]
            if not free:
                break
            j = max(free, key=lambda j: sims[i, j])
            used.add(j)
            total += max(0.0, float(sims[i, j]))
        return total / len(a_ids)

    def score(self, hypotheses, references) -> float:
        if len(hypotheses) != len(references) or not hypotheses:
            raise ValueError("need aligned, nonempty hypothesis/reference lists")
        vals = []
        for hyp, ref in zip(hypotheses, references):
            h_ids = self._vocab.encode(list(hyp))
            r_ids = self._vocab.encode(list(ref))
            p = self._greedy(h_ids, r_ids)
            r = self._greedy(r_ids, h_ids)
            vals.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
        return sum(vals) / len(vals)


def semantic_score(hypotheses, references, scorer: SemanticScorer | None = None):
    """Score via the registered adapter; None (absent) when no adapter is given.

    Adapter failures are reported as a warning, never fatal.
    """
    if scorer is None:
        return None
    try:
        return float(scorer.score(hypotheses, references))
    except Exception as err:  # noqa: BLE001 - adapter boundaries stay non-fatal
        warnings.warn(f"semantic scorer failed: {err}", stacklevel=2)
        return None


@dataclass
class LatencyRow:
    steps: int
    mean_s: float
    std_s: float
    loop_s: float
    overhead_s: float


@dataclass
class MetricsReport:
    """Evaluation results keyed like the standard report table."""

    bleu: float | None = None
    rouge_l: float | None = None
    semantic: float | None = None
    dist1: float | None = None
    self_bleu: float | None = None
    div4: float | None = None
    latency: list[LatencyRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    _KEYS = (
        ("BLEU", "bleu"),
        ("ROUGE-L", "rouge_l"),
        ("BERT", "semantic"),
        ("Dist-1", "dist1"),
        ("SelfBLEU", "self_bleu"),
        ("Div-4", "div4"),
    )

    def to_text(self) -> str:
        lines = []
        for key, attr in self._KEYS:
            val = getattr(self, attr)
            if val is not None:
                lines.append(f"{key}={val:.6f}")
        if self.latency:
            lines.append("[latency]")
            for row in self.latency:
                lines.append(
                    f"steps={row.steps} mean_s={row.mean_s:.6f} std_s={row.std_s:.6f} "
                    f"loop_s={row.loop_s:.6f} overhead_s={row.overhead_s:.6f}"
                )
        if self.meta:
            lines.append("[meta]")
            for k in sorted(self.meta):
                lines.append(f"{k}={self.meta[k]}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        out = {key: getattr(self, attr) for key, attr in self._KEYS}
        out["latency"] = [vars(r) for r in self.latency]
        out["meta"] = dict(self.meta)
        return out
