"""Pair corpora, vocabulary construction, and synthetic seq2seq tasks.

Corpora are JSONL files with one ``{"src": str, "trg": str}`` object per
line.  Tokenization is lowercased whitespace splitting.  Vocabularies
reserve ids 0..2 for the ``[PAD]``, ``[SEP]``, ``[UNK]`` specials and rank
the remaining tokens by frequency (ties broken lexicographically), so
rebuilding on the same corpus is bit-identical.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

PAD, SEP, UNK = "[PAD]", "[SEP]", "[UNK]"
PAD_ID, SEP_ID, UNK_ID = 0, 1, 2
SPECIALS = (PAD, SEP, UNK)

SYNTH_KINDS = ("copy", "reversal", "sort", "kv-paraphrase")


class Vocabulary:
    """Token <-> id mapping with fixed specials at ids 0..2."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:3]) != list(SPECIALS):
            raise ValueError(f"vocabulary must start with specials {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: list[str]) -> list[int]:
        return [self.token_to_id.get(w, UNK_ID) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        return Vocabulary(tokens)


@dataclass
class PairCorpus:
    """A list of (src tokens, trg tokens) pairs plus the shared vocabulary."""

    pairs: list[tuple[list[str], list[str]]]
    split: str = "train"
    vocab: Vocabulary | None = None


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def load_pairs(
    path,
    split: str = "train",
    max_src_len: int = 31,
    max_trg_len: int = 32,
) -> PairCorpus:
    """Read a JSONL pair file; truncate oversized pairs with a counted warning."""
    pairs = []
    truncated = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({err.msg})") from err
            if not isinstance(row, dict) or "src" not in row or "trg" not in row:
                raise ValueError(f"{path}:{lineno}: object must have 'src' and 'trg' fields")
            src, trg = tokenize(str(row["src"])), tokenize(str(row["trg"]))
            if len(src) > max_src_len or len(trg) > max_trg_len:
                truncated += 1
                src, trg = src[:max_src_len], trg[:max_trg_len]
            pairs.append((src, trg))
    if not pairs:
        raise ValueError(f"{path}: no pairs found")
    if truncated:
        warnings.warn(f"{path}: truncated {truncated} oversized pair(s)", stacklevel=2)
    return PairCorpus(pairs=pairs, split=split)


def save_pairs(path, corpus: PairCorpus) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for src, trg in corpus.pairs:
            f.write(json.dumps({"src": " ".join(src), "trg": " ".join(trg)}) + "\n")


def build_vocab(corpus: PairCorpus, max_size: int | None = None) -> Vocabulary:
    """Frequency-ranked vocabulary (ties lexicographic) after the specials."""
    counts: dict[str, int] = {}
    for src, trg in corpus.pairs:
        for w in src + trg:
            counts[w] = counts.get(w, 0) + 1
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(SPECIALS))]
    return Vocabulary(list(SPECIALS) + ranked)


def synth_task(
    kind: str,
    n: int,
    vocab_size: int,
    len_range: tuple[int, int],
    seed: int,
) -> PairCorpus:
    """Generate ``n`` distinct-source pairs for a toy seq2seq task.

    Word types are ``w00..wNN`` (zero padded so lexicographic order matches
    numeric order).  Tasks: ``copy`` (trg = src), ``reversal`` (trg =
    reversed src), ``sort`` (trg = src sorted), ``kv-paraphrase`` (trg =
    src through a fixed bijective synonym table pairing adjacent words).
    Deterministic given the seed; sources are rejection-sampled to be
    unique so downstream splits are disjoint by construction.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {SYNTH_KINDS}")
    if vocab_size < 8:
        raise ValueError(f"vocab_size must be >= 8, got {vocab_size}")
    lo, hi = len_range
    n_words = vocab_size - len(SPECIALS)
    if not (1 <= lo <= hi):
        raise ValueError(f"bad len_range {len_range}")
    if n > n_words**lo and lo == hi == 1:
        raise ValueError("cannot draw that many distinct sources")
    width = len(str(n_words - 1))
    words = [f"w{i:0{width}d}" for i in range(n_words)]
    # fixed bijective synonym table: adjacent words are partners, an odd
    # last word maps to itself
    synonym = {}
    for i in range(0, n_words - 1, 2):
        synonym[words[i]] = words[i + 1]
        synonym[words[i + 1]] = words[i]
    if n_words % 2 == 1:
        synonym[words[-1]] = words[-1]

    rng = np.random.default_rng(seed)
    seen: set[tuple[str, ...]] = set()
    pairs: list[tuple[list[str], list[str]]] = []
    attempts = 0
    while len(pairs) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise ValueError(
                f"could not draw {n} distinct sources from {n_words} words, lengths {len_range}"
            )
        length = int(rng.integers(lo, hi + 1))
        src = [words[int(i)] for i in rng.integers(0, n_words, size=length)]
        key = tuple(src)
        if key in seen:
            continue
        seen.add(key)
        if kind == "copy":
            trg = list(src)
        elif kind == "reversal":
            trg = src[::-1]
        elif kind == "sort":
            trg = sorted(src)
        else:  # kv-paraphrase
            trg = [synonym[w] for w in src]
        pairs.append((src, trg))
    corpus = PairCorpus(pairs=pairs, split="train")
    corpus.vocab = build_vocab(corpus)
    return corpus


def split_corpus(
    corpus: PairCorpus, n_valid: int, n_test: int, seed: int
) -> tuple[PairCorpus, PairCorpus, PairCorpus]:
    """Deterministic shuffle-split; pairs are distinct so splits are disjoint."""
    n = len(corpus.pairs)
    if n_valid + n_test >= n:
        raise ValueError(f"cannot carve {n_valid}+{n_test} holdout pairs from {n}")
    order = np.random.default_rng(seed).permutation(n)

    def pick(idx, split):
        return PairCorpus(
            pairs=[corpus.pairs[i] for i in idx], split=split, vocab=corpus.vocab
        )

    valid = pick(order[:n_valid], "valid")
    test = pick(order[n_valid : n_valid + n_test], "test")
    train = pick(order[n_valid + n_test :], "train")
    return train, valid, test


def pair_hashes(corpus: PairCorpus) -> set[tuple[tuple[str, ...], tuple[str, ...]]]:
    return {(tuple(s), tuple(t)) for s, t in corpus.pairs}


@dataclass
class EncodedPairs:
    """Token-id matrices ready for batching.

    Each row is ``src + [SEP] + trg`` padded to length L with ``[PAD]``
    tokens.  During training the padding is treated as learnable target
    content (the model learns to emit pad embeddings after the answer, so
    decoding can stop at the first pad); ``cond_len`` marks the condition
    span (src plus separator).
    """

    tokens: np.ndarray  # (N, L) int64
    cond_len: np.ndarray  # (N,)
    trg_len: np.ndarray  # (N,)
    L: int
    refs: list[list[str]] = field(default_factory=list)


def encode_corpus(corpus: PairCorpus, vocab: Vocabulary, L: int) -> EncodedPairs:
    n = len(corpus.pairs)
    tokens = np.full((n, L), PAD_ID, dtype=np.int64)
    cond_len = np.zeros(n, dtype=np.int64)
    trg_len = np.zeros(n, dtype=np.int64)
    refs = []
    for i, (src, trg) in enumerate(corpus.pairs):
        row = vocab.encode(src) + [SEP_ID] + vocab.encode(trg)
        if len(row) > L:
            raise ValueError(f"pair {i} length {len(row)} exceeds L={L}")
        tokens[i, : len(row)] = row
        cond_len[i] = len(src) + 1
        trg_len[i] = len(trg)
        refs.append(list(trg))
    return EncodedPairs(tokens=tokens, cond_len=cond_len, trg_len=trg_len, L=L, refs=refs)


def batch_tensors(enc: EncodedPairs, idx, device="cpu"):
    """Materialize rows ``idx`` as (tokens, cond_mask, pad_mask) tensors.

    ``pad_mask`` is all-False: pad tokens are target content here (see
    :class:`EncodedPairs`).
    """
    idx = np.asarray(idx)
    tokens = torch.from_numpy(enc.tokens[idx]).to(device)
    positions = torch.arange(enc.L, device=device).unsqueeze(0)
    cond_mask = positions < torch.from_numpy(enc.cond_len[idx]).to(device).unsqueeze(1)
    pad_mask = torch.zeros_like(cond_mask)
    return tokens, cond_mask, pad_mask


def cond_frame(src_ids, L: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Token row and condition mask for a bare source (``src + [SEP]`` then pads)."""
    src_ids = list(map(int, src_ids))
    if len(src_ids) + 1 > L:
        raise ValueError(f"source length {len(src_ids)} + separator exceeds L={L}")
    tokens = torch.full((1, L), PAD_ID, dtype=torch.long)
    tokens[0, : len(src_ids)] = torch.tensor(src_ids, dtype=torch.long)
    tokens[0, len(src_ids)] = SEP_ID
    cond_mask = torch.zeros(1, L, dtype=torch.bool)
    cond_mask[0, : len(src_ids) + 1] = True
    return tokens, cond_mask


def decode_target_rows(ids, cond_len, vocab: Vocabulary) -> list[list[str]]:
    """Decode the target span of rounded token-id rows, cut at the first pad."""
    out = []
    ids = ids.tolist() if hasattr(ids, "tolist") else ids
    for row, c in zip(ids, cond_len):
        tail = row[int(c) :]
        words = []
        for tok in tail:
            if int(tok) == PAD_ID:
                break
            words.append(vocab.tokens[int(tok)])
        out.append(words)
    return out
