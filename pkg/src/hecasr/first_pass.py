"""Simulated hybrid first pass.

A small feedforward frame classifier stands in for the acoustic model,
an energy-threshold automaton with hangover for the speech segmenter,
and a frame-synchronous prefix beam search (blank-collapsed, with
language-model fusion at token boundaries) produces N-best hypotheses.
The N-best cache file keyed by utterance id is the hand-off artifact to
the second pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .corpus import BLANK_ID, EOS_ID, Dataset
from .ngram import NGramLM, BiasedNGramLM

LOG_ZERO = -1e30


class FirstPassError(Exception):
    pass


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

@dataclass
class SegmenterConfig:
    energy_threshold: float = 0.1
    min_silence: int = 6     # silence gaps shorter than this merge into speech
    hangover: int = 2        # frames appended on each side of a speech run


@dataclass
class Segment:
    utt_id: str
    start: int
    end: int  # exclusive

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise FirstPassError(f"bad segment bounds [{self.start}, {self.end})")


def frame_energy(features: np.ndarray) -> np.ndarray:
    return (features.astype(np.float64) ** 2).mean(axis=1)


def speech_only(features: np.ndarray, cfg: SegmenterConfig) -> np.ndarray:
    """Concatenated segmented speech; falls back to the full signal when
    no speech is detected (downstream consumers stay total)."""
    segs = segment_features(features, cfg)
    if not segs:
        return features
    return np.concatenate([features[s.start:s.end] for s in segs], axis=0)


def segment_features(features: np.ndarray, cfg: SegmenterConfig,
                     utt_id: str = "") -> list[Segment]:
    """Energy-threshold segmentation.

    Automaton: frames with mean squared energy above the threshold are
    speech; maximal speech runs separated by fewer than `min_silence`
    silence frames merge; each run is then extended by `hangover` frames
    on both sides, re-merged, and clipped to [0, T).
    """
    t = features.shape[0]
    if t < 1:
        return []
    speech = frame_energy(features) > cfg.energy_threshold
    runs: list[list[int]] = []
    start = None
    for i, s in enumerate(speech):
        if s and start is None:
            start = i
        elif not s and start is not None:
            runs.append([start, i])
            start = None
    if start is not None:
        runs.append([start, t])
    if not runs:
        return []
    merged = [runs[0]]
    for a, b in runs[1:]:
        if a - merged[-1][1] < cfg.min_silence:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    extended = [[max(0, a - cfg.hangover), min(t, b + cfg.hangover)] for a, b in merged]
    final = [extended[0]]
    for a, b in extended[1:]:
        if a <= final[-1][1]:
            final[-1][1] = max(final[-1][1], b)
        else:
            final.append([a, b])
    return [Segment(utt_id, a, b) for a, b in final]


# ---------------------------------------------------------------------------
# acoustic frame scorer
# ---------------------------------------------------------------------------

class AcousticScorer:
    """Feedforward classifier over tokenizer symbols + blank per frame.

    Input is the frame stacked with `context` neighbours on each side.
    """

    def __init__(self, vocab_size: int, feat_dim: int, context: int = 1,
                 hidden: int = 64, seed: int = 0):
        self.vocab_size = vocab_size
        self.feat_dim = feat_dim
        self.context = context
        self.hidden = hidden
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 21])))
        in_dim = feat_dim * (2 * context + 1)
        self.params = {
            "w1": nm.Tensor(nm.uniform_init(rng, (in_dim, hidden), in_dim), requires_grad=True),
            "b1": nm.Tensor(np.zeros(hidden), requires_grad=True),
            "w2": nm.Tensor(nm.uniform_init(rng, (hidden, hidden), hidden), requires_grad=True),
            "b2": nm.Tensor(np.zeros(hidden), requires_grad=True),
            "w3": nm.Tensor(nm.uniform_init(rng, (hidden, vocab_size), hidden), requires_grad=True),
            "b3": nm.Tensor(np.zeros(vocab_size), requires_grad=True),
        }

    def stack_context(self, feats: np.ndarray) -> np.ndarray:
        c = self.context
        padded = np.pad(feats.astype(np.float64), [(c, c), (0, 0)])
        t = feats.shape[0]
        return np.concatenate([padded[j:j + t] for j in range(2 * c + 1)], axis=1)

    def logits(self, stacked: nm.Tensor) -> nm.Tensor:
        h = nm.swish(nm.add(nm.matmul(stacked, self.params["w1"]), self.params["b1"]))
        h = nm.swish(nm.add(nm.matmul(h, self.params["w2"]), self.params["b2"]))
        return nm.add(nm.matmul(h, self.params["w3"]), self.params["b3"])

    def log_probs(self, feats: np.ndarray) -> np.ndarray:
        """(T, V) per-frame log-probabilities (inference path, no tape)."""
        x = nm.Tensor(self.stack_context(feats))
        return nm.log_softmax(self.logits(x), axis=-1).data


@dataclass
class HybridModel:
    """First-pass recognizer: frame scorer + n-gram LM + segmenter."""

    scorer: AcousticScorer
    lm: NGramLM
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    frame_skip: int = 2
    lm_scale: float = 0.5

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        nm.save_checkpoint(out / "acoustic.ckpt", self.scorer.params)
        self.lm.save(out / "lm.tsv")
        meta = {
            "vocab_size": self.scorer.vocab_size,
            "feat_dim": self.scorer.feat_dim,
            "context": self.scorer.context,
            "hidden": self.scorer.hidden,
            "frame_skip": self.frame_skip,
            "lm_scale": self.lm_scale,
            "energy_threshold": self.segmenter.energy_threshold,
            "min_silence": self.segmenter.min_silence,
            "hangover": self.segmenter.hangover,
        }
        (out / "model.txt").write_text(
            "".join(f"{k} = {v}\n" for k, v in meta.items()), encoding="utf-8")

    @classmethod
    def load(cls, model_dir) -> "HybridModel":
        base = Path(model_dir)
        if not (base / "model.txt").exists():
            raise FirstPassError(f"missing first-pass model at {base}")
        meta = {}
        for ln in (base / "model.txt").read_text(encoding="utf-8").splitlines():
            if ln.strip():
                k, v = (p.strip() for p in ln.split("=", 1))
                meta[k] = v
        scorer = AcousticScorer(int(meta["vocab_size"]), int(meta["feat_dim"]),
                                int(meta["context"]), int(meta["hidden"]))
        loaded = nm.load_checkpoint(base / "acoustic.ckpt")
        for name, arr in loaded.items():
            scorer.params[name] = nm.Tensor(arr, requires_grad=True)
        seg = SegmenterConfig(float(meta["energy_threshold"]), int(meta["min_silence"]),
                              int(meta["hangover"]))
        return cls(scorer=scorer, lm=NGramLM.load(base / "lm.tsv"), segmenter=seg,
                   frame_skip=int(meta["frame_skip"]), lm_scale=float(meta["lm_scale"]))


# ---------------------------------------------------------------------------
# frame-synchronous decoding
# ---------------------------------------------------------------------------

@dataclass
class NBestEntry:
    rank: int
    tokens: tuple[int, ...]
    acoustic: float
    lm: float        # raw LM log probability (unscaled)
    combined: float  # acoustic + lm_scale * lm

    def text(self, tokenizer) -> str:
        return tokenizer.decode(self.tokens)


def _sort_key(tokens: tuple[int, ...], score: float):
    # higher combined score first, then shorter, then lexicographic ids
    return (-score, len(tokens), tokens)


def decode_segment(model: HybridModel, features: np.ndarray, beam: int, n: int,
                   lm_scale: float | None = None,
                   lm: NGramLM | BiasedNGramLM | None = None) -> list[NBestEntry]:
    """Prefix beam search over per-frame symbol posteriors.

    Blank/silence frames collapse CTC-style; extending a prefix with a
    token adds lm_scale * LM(token | prefix); finalization adds the end
    symbol closure. Returns the top-n distinct token sequences.
    """
    if beam < 1 or n < 1:
        raise FirstPassError("beam and n must be >= 1")
    if beam < n:
        raise FirstPassError(f"beam ({beam}) must be >= n ({n}) to guarantee n distinct hypotheses")
    lm = lm or model.lm
    scale = model.lm_scale if lm_scale is None else lm_scale
    frames = features[::model.frame_skip]
    logp = model.scorer.log_probs(frames)
    tokens_range = [i for i in lm.vocab_ids if i != EOS_ID]

    # prefix -> [p_blank, p_nonblank, lm_raw]
    beams: dict[tuple[int, ...], list[float]] = {(): [0.0, LOG_ZERO, 0.0]}
    for t in range(logp.shape[0]):
        nxt: dict[tuple[int, ...], list[float]] = {}
        for prefix, (pb, pnb, lm_raw) in beams.items():
            total = np.logaddexp(pb, pnb)
            # stay: blank, or repeat of the last label
            cur = nxt.get(prefix)
            if cur is None:
                cur = [LOG_ZERO, LOG_ZERO, lm_raw]
                nxt[prefix] = cur
            cur[0] = np.logaddexp(cur[0], total + logp[t, BLANK_ID])
            if prefix:
                cur[1] = np.logaddexp(cur[1], pnb + logp[t, prefix[-1]])
            # extend with a fresh label
            lmvec = lm.log_prob_array(prefix)
            for c in tokens_range:
                base = pb if prefix and c == prefix[-1] else total
                if base <= LOG_ZERO:
                    continue
                ext = prefix + (c,)
                entry = nxt.get(ext)
                if entry is None:
                    entry = [LOG_ZERO, LOG_ZERO, lm_raw + lmvec[c]]
                    nxt[ext] = entry
                entry[1] = np.logaddexp(entry[1], base + logp[t, c])
        ranked = sorted(
            nxt.items(),
            key=lambda kv: _sort_key(kv[0], np.logaddexp(kv[1][0], kv[1][1]) + scale * kv[1][2]))
        beams = dict(ranked[:beam])

    finals = []
    for prefix, (pb, pnb, lm_raw) in beams.items():
        acoustic = float(np.logaddexp(pb, pnb))
        lm_total = lm_raw + float(lm.log_prob(EOS_ID, prefix))
        finals.append((prefix, acoustic, lm_total, acoustic + scale * lm_total))
    finals.sort(key=lambda f: _sort_key(f[0], f[3]))
    return [NBestEntry(rank=i + 1, tokens=pfx, acoustic=ac, lm=lmv, combined=cb)
            for i, (pfx, ac, lmv, cb) in enumerate(finals[:n])]


def decode_utterance(model: HybridModel, features: np.ndarray, beam: int, n: int,
                     lm_scale: float | None = None,
                     lm: NGramLM | BiasedNGramLM | None = None
                     ) -> tuple[list[NBestEntry], list[Segment], bool]:
    """Segment an utterance, decode each segment, and concatenate the
    hypotheses rank-wise in segment order. Returns (entries, segments,
    empty_flag); an utterance with no speech yields one flagged empty entry."""
    segments = segment_features(features, model.segmenter)
    if not segments:
        return [NBestEntry(1, (), 0.0, 0.0, 0.0)], [], True
    per_segment = [decode_segment(model, features[s.start:s.end], beam, n, lm_scale, lm)
                   for s in segments]
    entries = []
    for rank in range(n):
        tokens: tuple[int, ...] = ()
        ac = lmv = cb = 0.0
        for seg_entries in per_segment:
            e = seg_entries[min(rank, len(seg_entries) - 1)]
            tokens += e.tokens
            ac += e.acoustic
            lmv += e.lm
            cb += e.combined
        entries.append(NBestEntry(rank + 1, tokens, ac, lmv, cb))
    # rank-wise concatenation may create duplicates; keep first occurrence
    seen = set()
    unique = []
    for e in entries:
        if e.tokens in seen:
            continue
        seen.add(e.tokens)
        unique.append(NBestEntry(len(unique) + 1, e.tokens, e.acoustic, e.lm, e.combined))
    return unique, segments, False


# ---------------------------------------------------------------------------
# N-best cache
# ---------------------------------------------------------------------------

class NBestCache:
    """Per-utterance N-best hypotheses, persisted as tab-separated text."""

    def __init__(self):
        self.entries: dict[str, list[NBestEntry]] = {}
        self.empty_ids: set[str] = set()

    def one_best(self, utt_id: str) -> tuple[int, ...]:
        if utt_id not in self.entries:
            raise FirstPassError(f"no cached hypotheses for utterance {utt_id}")
        return self.entries[utt_id][0].tokens

    def save(self, path) -> None:
        lines = []
        for utt_id in sorted(self.entries):
            for e in self.entries[utt_id]:
                ids = " ".join(str(t) for t in e.tokens)
                lines.append(f"{utt_id}\t{e.rank}\t{e.acoustic:.17g}\t{e.lm:.17g}"
                             f"\t{e.combined:.17g}\t{ids}")
        Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NBestCache":
        cache = cls()
        for ln in Path(path).read_text(encoding="utf-8").splitlines():
            if not ln:
                continue
            parts = ln.split("\t")
            if len(parts) != 6:
                raise FirstPassError(f"bad cache line: {ln!r}")
            utt_id, rank, ac, lmv, cb, ids = parts
            tokens = tuple(int(t) for t in ids.split()) if ids else ()
            cache.entries.setdefault(utt_id, []).append(
                NBestEntry(int(rank), tokens, float(ac), float(lmv), float(cb)))
        for utt_id, ents in cache.entries.items():
            ents.sort(key=lambda e: e.rank)
            if len(ents) == 1 and not ents[0].tokens:
                cache.empty_ids.add(utt_id)
        return cache


def build_nbest_cache(model: HybridModel, dataset: Dataset, beam: int = 8, n: int = 4,
                      lm_scale: float | None = None,
                      lm: NGramLM | BiasedNGramLM | None = None) -> NBestCache:
    """Decode every utterance and collect its N-best (STEP2 artifact)."""
    cache = NBestCache()
    for utt in dataset:
        entries, _, empty = decode_utterance(model, utt.features, beam, n, lm_scale, lm)
        cache.entries[utt.id] = entries
        if empty:
            cache.empty_ids.add(utt.id)
    return cache
