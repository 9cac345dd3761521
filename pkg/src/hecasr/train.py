"""Losses and the three-step training procedure.

STEP1 trains the first-pass frame classifier with cross-entropy against a
uniform alignment of transcript tokens over detected speech frames, plus
the n-gram LM on transcripts and text-only data. STEP2 (N-best caching)
lives in first_pass. STEP3 trains the second-pass model with the joint
objective 0.3 * CTC + 0.7 * attention CE.

The CTC loss is the standard forward-backward recursion over the
blank-interleaved label sequence, in log space, registered as a custom
operator with the analytic softmax-minus-posterior gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nm
from .corpus import BLANK_ID, EOS_ID, SOS_ID, Dataset, Tokenizer
from .first_pass import (AcousticScorer, HybridModel, NBestCache, SegmenterConfig,
                         segment_features, speech_only)
from .ngram import train_ngram
from .second_pass import AEDConfig, AEDModel

LOG_ZERO = -1e30


class TrainError(Exception):
    pass


class InfeasibleTargetError(TrainError):
    """Target cannot be aligned: needs more frames than available."""


@dataclass
class JointLossWeights:
    ctc: float = 0.3
    attention: float = 0.7

    def __post_init__(self):
        if not (0.0 <= self.ctc <= 1.0 and 0.0 <= self.attention <= 1.0):
            raise TrainError("loss weights must lie in [0, 1]")
        if abs(self.ctc + self.attention - 1.0) > 1e-12:
            raise TrainError("loss weights must sum to 1")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr_peak: float = 3e-3
    warmup_steps: int = 200
    clip_norm: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 disables periodic checkpoints

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.warmup_steps) < 1 or self.lr_peak <= 0 \
                or self.clip_norm <= 0:
            raise TrainError("training config values must be positive")

    def to_file(self, path) -> None:
        Path(path).write_text(
            "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self)),
            encoding="utf-8")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        kwargs = {}
        for ln in Path(path).read_text(encoding="utf-8").splitlines():
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            k, v = (p.strip() for p in ln.split("=", 1))
            names = {f.name: f for f in fields(cls)}
            if k not in names:
                raise TrainError(f"unknown train config key: {k}")
            kwargs[k] = float(v) if names[k].type == "float" else int(v)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# CTC loss
# ---------------------------------------------------------------------------

def ctc_feasible(target, t_frames: int) -> bool:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats <= t_frames


def _ctc_extend(target) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = target
    return ext


def _ctc_alpha(lp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    t_frames, s = lp.shape[0], ext.shape[0]
    skip_ok = np.zeros(s, dtype=bool)
    skip_ok[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
    alpha = np.full((t_frames, s), LOG_ZERO)
    alpha[0, 0] = lp[0, ext[0]]
    if s > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        step = np.full(s, LOG_ZERO)
        step[1:] = prev[:-1]
        skip = np.full(s, LOG_ZERO)
        skip[2:] = prev[:-2]
        skip = np.where(skip_ok, skip, LOG_ZERO)
        alpha[t] = np.logaddexp(np.logaddexp(prev, step), skip) + lp[t, ext]
    return alpha


def _ctc_beta(lp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    t_frames, s = lp.shape[0], ext.shape[0]
    skip_ok = np.zeros(s, dtype=bool)
    skip_ok[:-2] = (ext[:-2] != BLANK_ID) & (ext[:-2] != ext[2:])
    beta = np.full((t_frames, s), LOG_ZERO)
    beta[-1, -1] = lp[-1, ext[-1]]
    if s > 1:
        beta[-1, -2] = lp[-1, ext[-2]]
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1]
        step = np.full(s, LOG_ZERO)
        step[:-1] = nxt[1:]
        skip = np.full(s, LOG_ZERO)
        skip[:-2] = nxt[2:]
        skip = np.where(skip_ok, skip, LOG_ZERO)
        beta[t] = np.logaddexp(np.logaddexp(nxt, step), skip) + lp[t, ext]
    return beta


def _ctc_single(lp: np.ndarray, target) -> tuple[float, np.ndarray]:
    """(-log P(target), alignment posterior gamma (T, V)) for one utterance."""
    ext = _ctc_extend(target)
    alpha = _ctc_alpha(lp, ext)
    log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if ext.shape[0] > 1 else alpha[-1, -1]
    beta = _ctc_beta(lp, ext)
    # alpha and beta both include lp at t; divide one copy out
    post = alpha + beta - lp[:, ext] - log_z
    gamma = np.zeros_like(lp)
    for s, lab in enumerate(ext):
        gamma[:, lab] += np.exp(post[:, s])
    return float(-log_z), gamma


def _validate_ctc(targets, lengths, v: int) -> None:
    for i, (tgt, t_i) in enumerate(zip(targets, lengths)):
        if any(tok == BLANK_ID for tok in tgt):
            raise TrainError(f"item {i}: CTC target must not contain blank")
        if any(not (0 <= tok < v) for tok in tgt):
            raise TrainError(f"item {i}: CTC target token out of range")
        if not ctc_feasible(tgt, t_i):
            raise InfeasibleTargetError(
                f"item {i}: target of length {len(tgt)} (with repeats) does not fit "
                f"in {t_i} frames")


def _fwd_ctc(inp, attrs):
    logits = inp[0]
    if logits.ndim != 3:
        raise nm.ShapeError("ctc_loss", "logits must be (B, T, V)", [logits.shape])
    targets = attrs["targets"]
    lengths = attrs["lengths"]
    _validate_ctc(targets, lengths, logits.shape[2])
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    losses = np.zeros(len(targets))
    gammas = np.zeros_like(lp)
    for i, (tgt, t_i) in enumerate(zip(targets, lengths)):
        losses[i], gammas[i, :t_i] = _ctc_single(lp[i, :t_i], tgt)
    reduction = attrs.get("reduction", "mean")
    out = losses.mean() if reduction == "mean" else losses.sum()
    return np.asarray(out), (lp, gammas, lengths, reduction)


def _bwd_ctc(g, node):
    lp, gammas, lengths, reduction = node.saved
    probs = np.exp(lp)
    grad = probs - gammas
    for i, t_i in enumerate(lengths):
        grad[i, t_i:] = 0.0
    if reduction == "mean":
        grad /= len(lengths)
    return [grad * g]


nm.register_operator("ctc_loss", _fwd_ctc, _bwd_ctc)


def ctc_loss(logits: nm.Tensor, target) -> nm.Tensor:
    """-log P(target | logits) for one utterance; logits (T', V), log-softmax
    applied internally. Infeasible targets raise InfeasibleTargetError."""
    if len(logits.shape) != 2:
        raise nm.ShapeError("ctc_loss", "single-utterance logits must be (T, V)",
                            [logits.shape])
    t_frames = logits.shape[0]
    batched = nm.reshape(logits, (1,) + tuple(logits.shape))
    return nm.forward_op("ctc_loss", [batched],
                         {"targets": (tuple(int(t) for t in target),),
                          "lengths": (t_frames,), "reduction": "sum"})


def ctc_loss_batch(logits: nm.Tensor, targets, lengths) -> nm.Tensor:
    """Mean per-utterance CTC loss over a padded batch."""
    return nm.forward_op("ctc_loss", [logits],
                         {"targets": tuple(tuple(int(t) for t in tgt) for tgt in targets),
                          "lengths": tuple(int(x) for x in lengths),
                          "reduction": "mean"})


def ctc_loss_brute_force(log_probs: np.ndarray, target) -> float:
    """Enumeration oracle: sum alignment probabilities over all label strings
    of length T that collapse to the target. Only viable for tiny instances."""
    import itertools
    t_frames, v = log_probs.shape
    target = tuple(int(t) for t in target)
    total = LOG_ZERO
    for align in itertools.product(range(v), repeat=t_frames):
        prev = None
        collapsed = []
        for lab in align:
            if lab != prev:
                collapsed.append(lab)
            prev = lab
        if tuple(l for l in collapsed if l != BLANK_ID) != target:
            continue
        total = np.logaddexp(total, sum(log_probs[t, lab] for t, lab in enumerate(align)))
    return float(-total)


# ---------------------------------------------------------------------------
# attention CE and the joint loss
# ---------------------------------------------------------------------------

def attention_ce_loss(logits: nm.Tensor, reference, lengths=None) -> nm.Tensor:
    """Mean per-token negative log-likelihood of the reference (incl. eos).

    `logits` is (U, V) or (B, U, V) teacher-forced predictions; `reference`
    the aligned target ids, padded arbitrarily beyond `lengths`.
    """
    shape = logits.shape
    if len(shape) == 2:
        logits = nm.reshape(logits, (1,) + tuple(shape))
        reference = [list(reference)]
        lengths = [len(reference[0])]
    batch, u, v = logits.shape
    if lengths is None:
        lengths = [len(r) for r in reference]
    onehot = np.zeros((batch, u, v))
    total = 0
    for i, (ref, n) in enumerate(zip(reference, lengths)):
        if len(ref) < n or n > u:
            raise TrainError(f"item {i}: reference length {len(ref)}/{n} does not "
                             f"match logits with {u} positions")
        for j in range(n):
            onehot[i, j, int(ref[j])] = 1.0
        total += n
    ls = nm.log_softmax(logits, axis=-1)
    picked = nm.mul(ls, nm.Tensor(onehot))
    return nm.scale(nm.reduce_sum(picked), -1.0 / total)


def joint_loss(ctc: nm.Tensor, att: nm.Tensor,
               weights: JointLossWeights | None = None) -> nm.Tensor:
    """weights.ctc * ctc + weights.attention * att (0.3 / 0.7 by default)."""
    w = weights or JointLossWeights()
    if not (np.isfinite(ctc.data).all() and np.isfinite(att.data).all()):
        raise TrainError("joint loss inputs must be finite")
    return nm.add(nm.scale(ctc, w.ctc), nm.scale(att, w.attention))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with linear warmup then inverse-sqrt decay and global-norm clipping."""

    def __init__(self, params: dict[str, nm.Tensor], lr_peak: float, warmup: int,
                 clip_norm: float = 5.0, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.params = params
        self.lr_peak = lr_peak
        self.warmup = max(warmup, 1)
        self.clip_norm = clip_norm
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def learning_rate(self) -> float:
        t = max(self.t, 1)
        return self.lr_peak * min(t / self.warmup, (self.warmup / t) ** 0.5)

    def step(self, grads: dict[nm.Tensor, np.ndarray]) -> float:
        self.t += 1
        lr = self.learning_rate()
        gsq = 0.0
        by_name = {}
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            by_name[name] = g
            gsq += float((g.astype(np.float64) ** 2).sum())
        gnorm = gsq ** 0.5
        scale = min(1.0, self.clip_norm / gnorm) if gnorm > 0 else 1.0
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, g in by_name.items():
            g = g * scale
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            p = self.params[name]
            p.data = p.data - lr * update
        return lr


# ---------------------------------------------------------------------------
# STEP1: first pass
# ---------------------------------------------------------------------------

def uniform_alignment(transcript_ids, speech_frames: int) -> np.ndarray:
    """Distribute tokens over speech frames in order, near-equal shares."""
    n = len(transcript_ids)
    if n == 0:
        return np.full(speech_frames, BLANK_ID, dtype=np.int64)
    if speech_frames < n:
        raise InfeasibleTargetError(
            f"{speech_frames} speech frames cannot host {n} tokens")
    bounds = np.linspace(0, speech_frames, n + 1).round().astype(int)
    labels = np.empty(speech_frames, dtype=np.int64)
    for i in range(n):
        labels[bounds[i]:bounds[i + 1]] = transcript_ids[i]
    return labels


def frame_labels(features: np.ndarray, transcript_ids, seg_cfg: SegmenterConfig
                 ) -> np.ndarray | None:
    """Per-frame labels: uniform alignment over detected speech frames,
    blank elsewhere. None when the utterance cannot host its transcript."""
    segs = segment_features(features, seg_cfg)
    speech_idx = np.concatenate([np.arange(s.start, s.end) for s in segs]) if segs \
        else np.array([], dtype=int)
    labels = np.full(features.shape[0], BLANK_ID, dtype=np.int64)
    if len(speech_idx) < len(transcript_ids):
        return None
    if len(transcript_ids) == 0:
        return labels
    labels[speech_idx] = uniform_alignment(transcript_ids, len(speech_idx))
    return labels


def train_first_pass(dataset: Dataset, tokenizer: Tokenizer,
                     config: TrainConfig | None = None,
                     seg_cfg: SegmenterConfig | None = None,
                     lm_order: int = 2, lm_k: float = 0.5,
                     lm_texts: list[str] | None = None,
                     frame_skip: int = 2, lm_scale: float = 0.5,
                     hidden: int = 64, context: int = 1,
                     log_fn=None) -> tuple[HybridModel, dict]:
    """CE training of the frame classifier plus n-gram estimation."""
    if len(dataset) == 0:
        raise TrainError("cannot train the first pass on an empty dataset")
    config = config or TrainConfig(epochs=6, batch_size=256, lr_peak=2e-3, warmup_steps=100)
    seg_cfg = seg_cfg or SegmenterConfig()
    scorer = AcousticScorer(tokenizer.vocab_size, dataset.utterances[0].features.shape[1],
                            context=context, hidden=hidden, seed=config.seed)

    stacked, labels, skipped = [], [], 0
    for utt in dataset:
        ids = tokenizer.encode(utt.transcript)
        lab = frame_labels(utt.features, ids, seg_cfg)
        if lab is None:
            skipped += 1
            continue
        stacked.append(scorer.stack_context(utt.features))
        labels.append(lab)
    if not stacked:
        raise TrainError("no trainable utterances after alignment")
    x_all = np.concatenate(stacked, axis=0)
    y_all = np.concatenate(labels, axis=0)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 41])))
    opt = Adam(scorer.params, config.lr_peak, config.warmup_steps, config.clip_norm)
    epoch_losses = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_all))
        total, batches = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb = nm.Tensor(x_all[idx])
            with nm.record() as tape:
                logits = scorer.logits(xb)
                loss = attention_ce_loss(logits, y_all[idx].tolist())
                grads = nm.backward(loss, wrt=list(scorer.params.values()), tape=tape)
            lr = opt.step(grads)
            step += 1
            total += loss.item()
            batches += 1
            if log_fn:
                log_fn(f"{step}\t{loss.item():.6f}\t{lr:.6g}")
        epoch_losses.append(total / max(batches, 1))

    logits = scorer.logits(nm.Tensor(x_all)).data
    accuracy = float((logits.argmax(axis=1) == y_all).mean())

    transcripts = [tokenizer.encode(u.transcript) for u in dataset]
    if lm_texts:
        transcripts += [tokenizer.encode(t) for t in lm_texts]
    lm = train_ngram(transcripts, lm_order, lm_k)
    model = HybridModel(scorer=scorer, lm=lm, segmenter=seg_cfg,
                        frame_skip=frame_skip, lm_scale=lm_scale)
    stats = {"skipped": skipped, "epoch_losses": epoch_losses,
             "frame_accuracy": accuracy}
    return model, stats


# ---------------------------------------------------------------------------
# STEP3: second pass
# ---------------------------------------------------------------------------

def prepare_second_pass_inputs(dataset: Dataset, cache: NBestCache,
                               tokenizer: Tokenizer, seg_cfg: SegmenterConfig):
    """Per-utterance (speech features, one-best ids, reference ids); skips
    utterances whose reference is CTC-infeasible after subsampling."""
    from .second_pass import subsampled_length
    items, skipped = [], 0
    for utt in dataset:
        if utt.id not in cache.entries:
            raise TrainError(f"N-best cache is missing utterance {utt.id}")
        feats = speech_only(utt.features, seg_cfg)
        ref = tokenizer.encode(utt.transcript)
        if feats.shape[0] < 4 or not ctc_feasible(ref, subsampled_length(feats.shape[0])):
            skipped += 1
            continue
        items.append((feats, list(cache.one_best(utt.id)), ref))
    return items, skipped


def train_second_pass(dataset: Dataset, cache: NBestCache, aed_config: AEDConfig,
                      train_config: TrainConfig, tokenizer: Tokenizer,
                      seg_cfg: SegmenterConfig | None = None,
                      weights: JointLossWeights | None = None,
                      out_dir=None, log_fn=None) -> tuple[AEDModel, dict]:
    """Joint CTC + attention training against cached first-pass one-bests."""
    seg_cfg = seg_cfg or SegmenterConfig()
    weights = weights or JointLossWeights()
    items, skipped = prepare_second_pass_inputs(dataset, cache, tokenizer, seg_cfg)
    if not items:
        raise TrainError("no trainable utterances for the second pass")
    model = AEDModel(aed_config, seed=train_config.seed)
    opt = Adam(model.params, train_config.lr_peak, train_config.warmup_steps,
               train_config.clip_norm)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([train_config.seed, 51])))

    # length-bucketed batches, batch order shuffled per epoch
    order = np.argsort([it[0].shape[0] for it in items], kind="stable")
    batches = [order[lo:lo + train_config.batch_size]
               for lo in range(0, len(order), train_config.batch_size)]
    params = list(model.params.values())
    step = 0
    epoch_losses = []
    t0 = time.time()
    for epoch in range(train_config.epochs):
        perm = rng.permutation(len(batches))
        total, count = 0.0, 0
        for bi in perm:
            idx = batches[bi]
            feats = [items[i][0] for i in idx]
            onebests = [items[i][1] for i in idx]
            refs = [items[i][2] for i in idx]
            teacher_in = [[SOS_ID] + r for r in refs]
            teacher_out = [r + [EOS_ID] for r in refs]
            u_max = max(len(t) for t in teacher_in)
            t_in = np.full((len(idx), u_max), EOS_ID, dtype=np.int64)
            for i, t_seq in enumerate(teacher_in):
                t_in[i, :len(t_seq)] = t_seq
            t_lens = np.array([len(t) for t in teacher_in])
            with nm.record() as tape:
                audio_h, audio_mask, sub_lens = model.audio_encode(feats)
                ctc_logits = model.ctc_logits(audio_h)
                closs = ctc_loss_batch(ctc_logits, refs, sub_lens)
                text_h = text_mask = None
                if aed_config.structure != "audio_only":
                    text_h, text_mask = model.text_encode(onebests)
                att_logits = model.decoder_forward(t_in, audio_h, audio_mask,
                                                   text_h, text_mask, t_lens)
                aloss = attention_ce_loss(att_logits, teacher_out, t_lens)
                loss = joint_loss(closs, aloss, weights)
                grads = nm.backward(loss, wrt=params, tape=tape)
            lr = opt.step(grads)
            step += 1
            total += loss.item()
            count += 1
            if log_fn:
                log_fn(f"{step}\t{loss.item():.6f}\t{closs.item():.6f}"
                       f"\t{aloss.item():.6f}\t{lr:.6g}")
            if out_dir and train_config.checkpoint_every \
                    and step % train_config.checkpoint_every == 0:
                model.save(out_dir)
        epoch_losses.append(total / max(count, 1))
    if out_dir:
        model.save(out_dir)
    stats = {"skipped": skipped, "epoch_losses": epoch_losses,
             "steps": step, "seconds": time.time() - t0}
    return model, stats
