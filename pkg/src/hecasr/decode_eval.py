"""One-pass joint CTC/attention beam search and error-rate metrics.

The CTC prefix score is the probability mass of all alignments whose
collapse begins with a given label prefix, maintained by the standard
two-variable (blank-ending / non-blank-ending) forward recursion with
per-hypothesis reusable state. The joint beam search combines it with
the attention decoder's log-probabilities using the training weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .corpus import BLANK_ID, EOS_ID, SOS_ID, UNK_ID
from .second_pass import AEDModel
from .train import JointLossWeights

LOG_ZERO = -1e30


class DecodeError(Exception):
    pass


# ---------------------------------------------------------------------------
# CTC prefix scoring
# ---------------------------------------------------------------------------

@dataclass
class PrefixState:
    """Forward variables of one prefix: r[t, 0] non-blank-ending,
    r[t, 1] blank-ending; `last` is the prefix's final token."""
    r: np.ndarray  # (T, 2)
    last: int | None


class CTCPrefixScorer:
    """Incremental prefix scores over fixed per-frame CTC log-probs (T, V)."""

    def __init__(self, log_probs: np.ndarray, blank: int = BLANK_ID):
        self.lp = np.asarray(log_probs, dtype=np.float64)
        if self.lp.ndim != 2:
            raise DecodeError(f"CTC log-probs must be (T, V), got {self.lp.shape}")
        self.t_frames, self.vocab = self.lp.shape
        self.blank = blank
        self._blank_cum = np.cumsum(self.lp[:, blank])

    def initial_state(self) -> PrefixState:
        r = np.full((self.t_frames, 2), LOG_ZERO)
        r[:, 1] = self._blank_cum
        return PrefixState(r=r, last=None)

    def extend(self, state: PrefixState, cands) -> tuple[np.ndarray, np.ndarray]:
        """Prefix scores and new forward variables for each candidate token.

        Returns (psi (C,), r_new (T, 2, C)); psi[c] = log P(output begins
        with prefix + cands[c]). Blank is not an emittable label.
        """
        cands = np.asarray(cands, dtype=np.int64)
        if np.any(cands == self.blank):
            raise DecodeError("blank cannot be proposed as a label")
        t_frames = self.t_frames
        xs = self.lp[:, cands]  # (T, C)
        r_prev = state.r
        # phi[t]: mass of prefix alignments up to t that a fresh label may follow
        phi = np.logaddexp(r_prev[:, 1], r_prev[:, 0])[:, None].repeat(len(cands), axis=1)
        if state.last is not None:
            same = cands == state.last
            phi[:, same] = r_prev[:, 1][:, None]
        r_new = np.full((t_frames, 2, len(cands)), LOG_ZERO)
        start = 0.0 if state.last is None else LOG_ZERO
        r_new[0, 0] = xs[0] + start
        psi = r_new[0, 0].copy()
        for t in range(1, t_frames):
            r_new[t, 0] = np.logaddexp(r_new[t - 1, 0], phi[t - 1]) + xs[t]
            r_new[t, 1] = np.logaddexp(r_new[t - 1, 1], r_new[t - 1, 0]) + self.lp[t, self.blank]
            psi = np.logaddexp(psi, phi[t - 1] + xs[t])
        return psi, r_new

    def state_for(self, r_new: np.ndarray, index: int, token: int) -> PrefixState:
        return PrefixState(r=np.ascontiguousarray(r_new[:, :, index]), last=int(token))

    def complete_score(self, state: PrefixState) -> float:
        """Log-probability that the output equals the prefix exactly
        (eos closure)."""
        return float(np.logaddexp(state.r[-1, 0], state.r[-1, 1]))


def ctc_prefix_score(log_probs: np.ndarray, prefix, next_token: int) -> float:
    """One-shot convenience: log P(output begins with prefix + next)."""
    scorer = CTCPrefixScorer(log_probs)
    state = scorer.initial_state()
    for tok in prefix:
        psi, r_new = scorer.extend(state, [int(tok)])
        state = scorer.state_for(r_new, 0, int(tok))
    psi, _ = scorer.extend(state, [int(next_token)])
    return float(psi[0])


def ctc_complete_score(log_probs: np.ndarray, sequence) -> float:
    """Log-probability that the output collapses to exactly `sequence`."""
    scorer = CTCPrefixScorer(log_probs)
    state = scorer.initial_state()
    for tok in sequence:
        _, r_new = scorer.extend(state, [int(tok)])
        state = scorer.state_for(r_new, 0, int(tok))
    return scorer.complete_score(state)


# ---------------------------------------------------------------------------
# joint beam search
# ---------------------------------------------------------------------------

@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    attention_score: float
    ctc_score: float
    joint_score: float
    finished: bool
    truncated: bool = False


def _tie_key(h: BeamHypothesis):
    return (-h.joint_score, len(h.tokens), h.tokens)


def joint_beam_search(model: AEDModel, features: np.ndarray, onebest,
                      beam: int = 5, max_len: int | None = None,
                      weights: JointLossWeights | None = None,
                      length_normalize: bool = False) -> BeamHypothesis:
    """One-pass beam search scoring candidates with
    weights.ctc * ctc_prefix + weights.attention * attention log-prob.

    Hypotheses that emit eos move to a finished pool; the best finished
    hypothesis wins (no length normalization by default). If nothing
    finishes within max_len the best live hypothesis is returned with the
    truncated flag set.
    """
    if beam < 1:
        raise DecodeError("beam must be >= 1")
    w = weights or JointLossWeights()
    state0 = model.start_state(features, list(onebest))
    ctc_lp = nm.log_softmax(model.ctc_logits(state0.audio_h), axis=-1).data[0]
    t_sub = ctc_lp.shape[0]
    if max_len is None:
        max_len = 2 * t_sub
    if max_len < 1:
        raise DecodeError("max_len must be >= 1")
    scorer = CTCPrefixScorer(ctc_lp)
    cand_ids = np.array([i for i in range(model.config.vocab_size)
                         if i not in (BLANK_ID, UNK_ID, SOS_ID, EOS_ID)], dtype=np.int64)

    live = [{"tokens": (), "att": 0.0, "joint": 0.0,
             "ctc_state": scorer.initial_state(), "dec": state0, "logp": state0.step()}]
    finished: list[BeamHypothesis] = []

    def final_key(h: BeamHypothesis):
        score = h.joint_score / max(len(h.tokens), 1) if length_normalize else h.joint_score
        return (-score, len(h.tokens), h.tokens)

    for _ in range(max_len):
        candidates = []
        for hyp in live:
            # finishing alternative: emit eos now
            eos_ctc = scorer.complete_score(hyp["ctc_state"])
            eos_att = hyp["att"] + float(hyp["logp"][EOS_ID])
            finished.append(BeamHypothesis(
                tokens=hyp["tokens"], attention_score=eos_att, ctc_score=eos_ctc,
                joint_score=w.ctc * eos_ctc + w.attention * eos_att, finished=True))
            psi, r_new = scorer.extend(hyp["ctc_state"], cand_ids)
            att_new = hyp["att"] + hyp["logp"][cand_ids]
            joint = w.ctc * psi + w.attention * att_new
            for j, tok in enumerate(cand_ids):
                candidates.append((hyp, int(tok), float(joint[j]), float(att_new[j]),
                                   r_new, j))
        candidates.sort(key=lambda c: (-c[2], len(c[0]["tokens"]) + 1,
                                       c[0]["tokens"] + (c[1],)))
        live = []
        best_finished = max(f.joint_score for f in finished)
        for hyp, tok, joint, att_new, r_new, j in candidates[:beam]:
            # a live prefix's joint only decreases as it grows, so prefixes
            # strictly below the best finished hypothesis are dead
            if not length_normalize and joint < best_finished:
                continue
            dec = hyp["dec"].clone()
            logp = dec.step(tok)
            live.append({"tokens": hyp["tokens"] + (tok,), "att": att_new,
                         "joint": joint, "ctc_state": scorer.state_for(r_new, j, tok),
                         "dec": dec, "logp": logp})
        if not live:
            break

    if finished:
        finished.sort(key=final_key)
        return finished[0]
    best = min(live, key=lambda h: (-h["joint"], len(h["tokens"]), h["tokens"]))
    eos_ctc = scorer.complete_score(best["ctc_state"])
    return BeamHypothesis(tokens=best["tokens"], attention_score=best["att"],
                          ctc_score=eos_ctc,
                          joint_score=w.ctc * eos_ctc + w.attention * best["att"],
                          finished=False, truncated=True)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def edit_distance(ref, hyp) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a minimal alignment.

    Tie preference when several alignments are minimal: substitution over
    insertion over deletion.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = dp[i, j - 1] + 1
            dele = dp[i - 1, j] + 1
            dp[i, j] = min(sub, ins, dele)
    s = d = ins_count = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                s += 1
            i, j = i - 1, j - 1
        elif j > 0 and dp[i, j] == dp[i, j - 1] + 1:
            ins_count += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return s, d, ins_count


def wer(references: dict[str, list], hypotheses: dict[str, list]) -> float:
    """100 * (S + D + I) / total reference tokens over aligned id sets."""
    if set(references) != set(hypotheses):
        missing = set(references) ^ set(hypotheses)
        raise DecodeError(f"reference/hypothesis id sets differ: {sorted(missing)[:5]}")
    errors = 0
    total = 0
    for utt_id, ref in references.items():
        s, d, i = edit_distance(ref, hypotheses[utt_id])
        errors += s + d + i
        total += len(ref)
    if total == 0:
        raise DecodeError("empty reference set")
    return 100.0 * errors / total


def werr(baseline: float, system: float) -> float:
    """Relative error-rate reduction (%) of system over baseline."""
    if baseline <= 0:
        raise DecodeError("baseline WER must be positive")
    return (baseline - system) / baseline * 100.0
