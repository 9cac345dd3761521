"""Token-level n-gram language model with add-k smoothing and biasing.

Probabilities normalize over the character ids plus the end symbol (eos).
Histories are full token prefixes; the model truncates them to order-1
internally, while a biased view inspects the full history so that phrase
completions longer than the model order still receive their boost.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .corpus import EOS_ID, SOS_ID


class LMError(Exception):
    pass


class NGramLM:
    """Add-k smoothed n-gram model over token ids.

    P(w | h) = (c(h, w) + k) / (c(h) + k * |V|), with V the scorable
    vocabulary (characters + eos) and h left-padded with sos.
    """

    def __init__(self, order: int, k: float, vocab_ids: list[int]):
        if order < 1:
            raise LMError("order must be >= 1")
        if k <= 0:
            raise LMError("smoothing k must be > 0")
        self.order = order
        self.k = float(k)
        self.vocab_ids = sorted(set(int(v) for v in vocab_ids) | {EOS_ID})
        self.max_id = max(self.vocab_ids)
        self.counts: dict[tuple, np.ndarray] = {}
        self.totals: dict[tuple, int] = {}
        self._cache: dict[tuple, np.ndarray] = {}

    def _context(self, history: tuple) -> tuple:
        ctx = (SOS_ID,) * max(self.order - 1 - len(history), 0) + tuple(history)
        return ctx[len(ctx) - (self.order - 1):] if self.order > 1 else ()

    def observe_sequence(self, tokens) -> None:
        """Count n-grams of one sentence, with an eos event at the end."""
        seq = list(int(t) for t in tokens) + [EOS_ID]
        history: tuple = ()
        for tok in seq:
            ctx = self._context(history)
            row = self.counts.get(ctx)
            if row is None:
                row = np.zeros(self.max_id + 1, dtype=np.int64)
                self.counts[ctx] = row
            row[tok] += 1
            self.totals[ctx] = self.totals.get(ctx, 0) + 1
            history = history + (tok,)
        self._cache.clear()

    def log_prob_array(self, history) -> np.ndarray:
        """Log P(w | history) for every id; ids outside the vocabulary get
        a large negative sentinel."""
        ctx = self._context(tuple(history))
        cached = self._cache.get(ctx)
        if cached is not None:
            return cached
        vsize = len(self.vocab_ids)
        row = self.counts.get(ctx)
        total = self.totals.get(ctx, 0)
        out = np.full(self.max_id + 1, -1e30)
        counts = row[self.vocab_ids] if row is not None else np.zeros(vsize)
        probs = (counts + self.k) / (total + self.k * vsize)
        out[self.vocab_ids] = np.log(probs)
        self._cache[ctx] = out
        return out

    def log_prob(self, token: int, history) -> float:
        return float(self.log_prob_array(history)[int(token)])

    def score_sequence(self, tokens) -> float:
        """Log probability of the sentence including the end symbol."""
        total = 0.0
        history: tuple = ()
        for tok in list(tokens) + [EOS_ID]:
            total += self.log_prob(tok, history)
            history = history + (int(tok),)
        return total

    def save(self, path) -> None:
        lines = [f"order\t{self.order}", f"k\t{self.k!r}",
                 "vocab\t" + " ".join(str(v) for v in self.vocab_ids)]
        for ctx in sorted(self.counts):
            row = self.counts[ctx]
            for tok in np.nonzero(row)[0]:
                lines.append(f"{' '.join(str(c) for c in ctx)}\t{tok}\t{row[tok]}")
        Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NGramLM":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < 3:
            raise LMError(f"{path}: truncated model file")
        order = int(lines[0].split("\t")[1])
        k = float(lines[1].split("\t")[1])
        vocab = [int(v) for v in lines[2].split("\t")[1].split()]
        lm = cls(order, k, vocab)
        for ln in lines[3:]:
            if not ln:
                continue
            ctx_s, tok_s, cnt_s = ln.split("\t")
            ctx = tuple(int(c) for c in ctx_s.split()) if ctx_s else ()
            row = lm.counts.get(ctx)
            if row is None:
                row = np.zeros(lm.max_id + 1, dtype=np.int64)
                lm.counts[ctx] = row
            row[int(tok_s)] += int(cnt_s)
            lm.totals[ctx] = lm.totals.get(ctx, 0) + int(cnt_s)
        return lm


def train_ngram(token_sequences, order: int, k: float) -> NGramLM:
    """Count-based training over tokenized sentences."""
    seqs = list(token_sequences)
    if not seqs:
        raise LMError("cannot train an n-gram model on an empty corpus")
    vocab = sorted({int(t) for seq in seqs for t in seq})
    lm = NGramLM(order, k, vocab)
    for seq in seqs:
        lm.observe_sequence(seq)
    return lm


class BiasedNGramLM:
    """Scoring view: token steps that complete a biased phrase get an
    additive log boost. Scores are not renormalized (decoders consume
    scores, not probabilities)."""

    def __init__(self, base: NGramLM, phrases, boost: float):
        if boost < 0:
            raise LMError("boost must be >= 0")
        self.base = base
        self.phrases = [tuple(int(t) for t in p) for p in phrases]
        if any(len(p) == 0 for p in self.phrases):
            raise LMError("biased phrases must be non-empty")
        self.boost = float(boost)
        self.max_id = base.max_id
        self.order = base.order
        self.vocab_ids = base.vocab_ids

    def log_prob_array(self, history) -> np.ndarray:
        history = tuple(int(t) for t in history)
        out = self.base.log_prob_array(history)
        if self.boost == 0.0:
            return out
        out = out.copy()
        for phrase in self.phrases:
            if len(phrase) - 1 <= len(history) and (len(phrase) == 1 or
                    history[len(history) - len(phrase) + 1:] == phrase[:-1]):
                if phrase[-1] <= self.max_id:
                    out[phrase[-1]] += self.boost
        return out

    def log_prob(self, token: int, history) -> float:
        return float(self.log_prob_array(history)[int(token)])

    def score_sequence(self, tokens) -> float:
        total = 0.0
        history: tuple = ()
        for tok in list(tokens) + [EOS_ID]:
            total += self.log_prob(tok, history)
            history = history + (int(tok),)
        return total


def bias_lm(lm: NGramLM, phrases, boost: float) -> BiasedNGramLM:
    """Wrap an n-gram model with additive log-boosts for phrase completions."""
    return BiasedNGramLM(lm, phrases, boost)
