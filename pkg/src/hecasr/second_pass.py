"""Second-pass attention encoder-decoder with dual cross-attention.

Three components: a conformer audio encoder over 4x-subsampled frames, a
transformer text encoder over the first-pass one-best hypothesis, and a
decoder that attends to both encoders either in parallel (equal-weight
combination of the two contexts) or cascaded (audio context becomes the
query for text attention). A linear CTC head hangs off the audio encoder
alone, so CTC logits are structurally independent of the text input.

All blocks are pre-norm with a final layer norm per stack; positions use
absolute sinusoidal encodings throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nm
from .corpus import EOS_ID, SOS_ID

STRUCTURES = ("pca", "cca", "audio_only")

# sentinel fed to the text encoder when the first pass produced nothing
EMPTY_ONEBEST_SENTINEL = EOS_ID


class ModelError(Exception):
    pass


@dataclass
class AEDConfig:
    vocab_size: int
    feat_dim: int
    embed_dim: int = 64
    audio_layers: int = 4
    audio_heads: int = 4
    conv_kernel: int = 3
    audio_ff: int = 128
    text_layers: int = 2
    text_heads: int = 4
    text_ff: int = 128
    decoder_layers: int = 2
    decoder_heads: int = 4
    decoder_ff: int = 128
    structure: str = "pca"
    dropout: float = 0.0

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ModelError(f"decoder structure must be one of {STRUCTURES}")
        for h in (self.audio_heads, self.text_heads, self.decoder_heads):
            if self.embed_dim % h != 0:
                raise ModelError(f"embed dim {self.embed_dim} not divisible by {h} heads")
        if self.dropout != 0.0:
            raise ModelError("dropout is fixed at 0")

    def to_file(self, path) -> None:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path) -> "AEDConfig":
        raw = {}
        for ln in Path(path).read_text(encoding="utf-8").splitlines():
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            k, v = (p.strip() for p in ln.split("=", 1))
            raw[k] = v
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            val = raw.pop(f.name)
            kwargs[f.name] = val if f.name == "structure" else (
                float(val) if f.name == "dropout" else int(val))
        if raw:
            raise ModelError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs)


def paper_preset(vocab_size: int, feat_dim: int, structure: str = "pca") -> AEDConfig:
    """Full-scale architecture hyperparameters (recorded, not CPU-trainable)."""
    return AEDConfig(vocab_size, feat_dim, embed_dim=512,
                     audio_layers=18, audio_heads=8, conv_kernel=3, audio_ff=1024,
                     text_layers=6, text_heads=8, text_ff=2048,
                     decoder_layers=6, decoder_heads=8, decoder_ff=2048,
                     structure=structure)


def desk_preset(vocab_size: int, feat_dim: int, structure: str = "pca") -> AEDConfig:
    """CPU-trainable scale exercising every structural element."""
    return AEDConfig(vocab_size, feat_dim, structure=structure)


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    key = (length, dim)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(length)[:, None]
        i = np.arange(dim // 2)[None, :]
        angle = pos / np.power(10000.0, 2.0 * i / dim)
        pe = np.zeros((length, dim))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        _PE_CACHE[key] = pe
    return pe


def subsampled_length(t: int, stride: int = 2, stages: int = 2) -> int:
    for _ in range(stages):
        t = -(-t // stride)
    return t


class AEDModel:
    """Parameters plus forward paths for the second-pass recognizer."""

    def __init__(self, config: AEDConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, nm.Tensor] = {}
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 31])))
        self._build()

    # -- parameter construction ------------------------------------------------

    def _weight(self, name: str, shape, fan_in: int) -> None:
        self.params[name] = nm.Tensor(nm.uniform_init(self._rng, shape, fan_in),
                                      requires_grad=True, name=name)

    def _bias(self, name: str, dim: int) -> None:
        self.params[name] = nm.Tensor(np.zeros(dim), requires_grad=True, name=name)

    def _ln(self, name: str, dim: int) -> None:
        self.params[name + ".scale"] = nm.Tensor(np.ones(dim), requires_grad=True)
        self.params[name + ".shift"] = nm.Tensor(np.zeros(dim), requires_grad=True)

    def _attention_params(self, prefix: str, dim: int) -> None:
        for p in ("wq", "wk", "wv", "wo"):
            self._weight(f"{prefix}.{p}", (dim, dim), dim)
            self._bias(f"{prefix}.b{p[1]}", dim)

    def _ff_params(self, prefix: str, dim: int, hidden: int) -> None:
        self._weight(f"{prefix}.w1", (dim, hidden), dim)
        self._bias(f"{prefix}.b1", hidden)
        self._weight(f"{prefix}.w2", (hidden, dim), hidden)
        self._bias(f"{prefix}.b2", dim)

    def _build(self) -> None:
        c = self.config
        e = c.embed_dim
        self._weight("frontend.conv1.w", (3, c.feat_dim, e), 3 * c.feat_dim)
        self._bias("frontend.conv1.b", e)
        self._weight("frontend.conv2.w", (3, e, e), 3 * e)
        self._bias("frontend.conv2.b", e)
        for i in range(c.audio_layers):
            p = f"audio.{i}"
            self._ln(f"{p}.ln_ff1", e)
            self._ff_params(f"{p}.ff1", e, c.audio_ff)
            self._ln(f"{p}.ln_attn", e)
            self._attention_params(f"{p}.attn", e)
            self._ln(f"{p}.ln_conv", e)
            self._weight(f"{p}.conv.pw1", (e, 2 * e), e)
            self._bias(f"{p}.conv.pb1", 2 * e)
            self._weight(f"{p}.conv.dw", (c.conv_kernel, e), c.conv_kernel)
            self._bias(f"{p}.conv.db", e)
            self._ln(f"{p}.conv.ln_dw", e)
            self._weight(f"{p}.conv.pw2", (e, e), e)
            self._bias(f"{p}.conv.pb2", e)
            self._ln(f"{p}.ln_ff2", e)
            self._ff_params(f"{p}.ff2", e, c.audio_ff)
            self._ln(f"{p}.ln_out", e)
        if c.structure != "audio_only":
            self._weight("text.embed", (c.vocab_size, e), e)
            for i in range(c.text_layers):
                p = f"text.{i}"
                self._ln(f"{p}.ln1", e)
                self._attention_params(f"{p}.attn", e)
                self._ln(f"{p}.ln2", e)
                self._ff_params(f"{p}.ff", e, c.text_ff)
            self._ln("text.ln_out", e)
        self._weight("dec.embed", (c.vocab_size, e), e)
        for i in range(c.decoder_layers):
            p = f"dec.{i}"
            self._ln(f"{p}.ln_self", e)
            self._attention_params(f"{p}.self", e)
            if c.structure == "pca":
                self._ln(f"{p}.ln_cross", e)
                self._attention_params(f"{p}.cross_audio", e)
                self._attention_params(f"{p}.cross_text", e)
            elif c.structure == "cca":
                self._ln(f"{p}.ln_cross_audio", e)
                self._attention_params(f"{p}.cross_audio", e)
                self._ln(f"{p}.ln_cross_text", e)
                self._attention_params(f"{p}.cross_text", e)
            else:
                self._ln(f"{p}.ln_cross_audio", e)
                self._attention_params(f"{p}.cross_audio", e)
            self._ln(f"{p}.ln_ff", e)
            self._ff_params(f"{p}.ff", e, c.decoder_ff)
        self._ln("dec.ln_out", e)
        self._weight("dec.out", (e, c.vocab_size), e)
        self._bias("dec.out_b", c.vocab_size)
        self._weight("ctc.w", (e, c.vocab_size), e)
        self._bias("ctc.b", c.vocab_size)

    # -- building blocks --------------------------------------------------------

    def _p(self, name: str) -> nm.Tensor:
        return self.params[name]

    def _norm(self, prefix: str, x: nm.Tensor) -> nm.Tensor:
        return nm.layer_norm(x, self._p(prefix + ".scale"), self._p(prefix + ".shift"))

    def _project_heads(self, x: nm.Tensor, w: str, b: str, heads: int) -> nm.Tensor:
        batch, t, e = x.shape
        y = nm.add(nm.matmul(x, self._p(w)), self._p(b))
        y = nm.reshape(y, (batch, t, heads, e // heads))
        return nm.transpose(y, (0, 2, 1, 3))

    def _attend(self, prefix: str, q_in: nm.Tensor, kv_in: nm.Tensor,
                mask: nm.Tensor | None, heads: int,
                k_cached: nm.Tensor | None = None,
                v_cached: nm.Tensor | None = None) -> nm.Tensor:
        batch, tq, e = q_in.shape
        q = self._project_heads(q_in, f"{prefix}.wq", f"{prefix}.bq", heads)
        k = k_cached if k_cached is not None else \
            self._project_heads(kv_in, f"{prefix}.wk", f"{prefix}.bk", heads)
        v = v_cached if v_cached is not None else \
            self._project_heads(kv_in, f"{prefix}.wv", f"{prefix}.bv", heads)
        scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(e // heads))
        if mask is not None:
            scores = nm.masked_fill(scores, mask, nm.NEG_FILL)
        weights = nm.softmax(scores, axis=-1)
        ctx = nm.matmul(weights, v)
        ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (batch, tq, e))
        return nm.add(nm.matmul(ctx, self._p(f"{prefix}.wo")), self._p(f"{prefix}.bo"))

    def _ff(self, prefix: str, x: nm.Tensor, act: str) -> nm.Tensor:
        h = nm.add(nm.matmul(x, self._p(f"{prefix}.w1")), self._p(f"{prefix}.b1"))
        h = nm.swish(h) if act == "swish" else nm.relu(h)
        return nm.add(nm.matmul(h, self._p(f"{prefix}.w2")), self._p(f"{prefix}.b2"))

    # -- audio encoder -----------------------------------------------------------

    def audio_encode(self, features: np.ndarray | list[np.ndarray]
                     ) -> tuple[nm.Tensor, nm.Tensor, np.ndarray]:
        """Conformer encoding of padded frame batches.

        Accepts one (T, D) matrix or a list of them; returns hidden states
        (B, T', E) with T' = ceil(T_max / 4), a key-padding mask
        (B, 1, 1, T'), and the per-item subsampled lengths.
        """
        mats = [features] if isinstance(features, np.ndarray) else list(features)
        if any(m.shape[0] < 4 for m in mats):
            raise ModelError("audio_encode requires at least 4 frames (4x subsampling)")
        if any(m.shape[1] != self.config.feat_dim for m in mats):
            raise ModelError(f"feature dim must be {self.config.feat_dim}")
        t_max = max(m.shape[0] for m in mats)
        batch = np.zeros((len(mats), t_max, self.config.feat_dim))
        for i, m in enumerate(mats):
            batch[i, :m.shape[0]] = m
        lengths = np.array([subsampled_length(m.shape[0]) for m in mats])

        x = nm.Tensor(batch)
        x = nm.relu(nm.strided_conv1d(x, self._p("frontend.conv1.w"),
                                      self._p("frontend.conv1.b"), stride=2))
        x = nm.relu(nm.strided_conv1d(x, self._p("frontend.conv2.w"),
                                      self._p("frontend.conv2.b"), stride=2))
        t_sub = x.shape[1]
        pe = nm.Tensor(sinusoidal_positions(t_sub, self.config.embed_dim)[None])
        x = nm.add(x, pe)

        pad = np.arange(t_sub)[None, :] >= lengths[:, None]  # (B, T')
        attn_mask = nm.Tensor(pad[:, None, None, :])
        zero_mask = nm.Tensor(pad[:, :, None])
        heads = self.config.audio_heads
        for i in range(self.config.audio_layers):
            p = f"audio.{i}"
            x = nm.add(x, nm.scale(self._ff(f"{p}.ff1", self._norm(f"{p}.ln_ff1", x), "swish"), 0.5))
            normed = self._norm(f"{p}.ln_attn", x)
            x = nm.add(x, self._attend(f"{p}.attn", normed, normed, attn_mask, heads))
            x = nm.add(x, self._conv_module(p, x, zero_mask))
            x = nm.add(x, nm.scale(self._ff(f"{p}.ff2", self._norm(f"{p}.ln_ff2", x), "swish"), 0.5))
            x = self._norm(f"{p}.ln_out", x)
        return x, attn_mask, lengths

    def _conv_module(self, p: str, x: nm.Tensor, zero_mask: nm.Tensor) -> nm.Tensor:
        """Pointwise GLU, depthwise conv (padded frames zeroed first so the
        kernel never mixes in padding), layer norm, swish, pointwise."""
        h = self._norm(f"{p}.ln_conv", x)
        h = nm.masked_fill(h, zero_mask, 0.0)
        h = nm.glu(nm.add(nm.matmul(h, self._p(f"{p}.conv.pw1")), self._p(f"{p}.conv.pb1")), axis=-1)
        h = nm.depthwise_conv1d(h, self._p(f"{p}.conv.dw"), self._p(f"{p}.conv.db"))
        h = self._norm(f"{p}.conv.ln_dw", h)
        h = nm.swish(h)
        return nm.add(nm.matmul(h, self._p(f"{p}.conv.pw2")), self._p(f"{p}.conv.pb2"))

    # -- text encoder -------------------------------------------------------------

    def text_encode(self, onebest: list[int] | list[list[int]]
                    ) -> tuple[nm.Tensor, nm.Tensor]:
        """Transformer encoding of the first-pass one-best token ids.

        An empty hypothesis is replaced by a single sentinel token so the
        decoder contract holds. Returns (B, U', E) hiddens and key mask.
        """
        if self.config.structure == "audio_only":
            raise ModelError("audio_only model has no text encoder")
        if len(onebest) == 0 or isinstance(onebest[0], (int, np.integer)):
            seqs = [list(onebest)]
        else:
            seqs = [list(s) for s in onebest]
        seqs = [s if len(s) else [EMPTY_ONEBEST_SENTINEL] for s in seqs]
        for s in seqs:
            if any(not (0 <= t < self.config.vocab_size) for t in s):
                raise ModelError(f"one-best token id out of vocabulary: {s}")
        u_max = max(len(s) for s in seqs)
        ids = np.zeros((len(seqs), u_max), dtype=np.int64)
        lengths = np.array([len(s) for s in seqs])
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
        x = nm.embedding(self._p("text.embed"), nm.Tensor(ids))
        x = nm.scale(x, math.sqrt(self.config.embed_dim))
        x = nm.add(x, nm.Tensor(sinusoidal_positions(u_max, self.config.embed_dim)[None]))
        pad = np.arange(u_max)[None, :] >= lengths[:, None]
        mask = nm.Tensor(pad[:, None, None, :])
        heads = self.config.text_heads
        for i in range(self.config.text_layers):
            p = f"text.{i}"
            normed = self._norm(f"{p}.ln1", x)
            x = nm.add(x, self._attend(f"{p}.attn", normed, normed, mask, heads))
            x = nm.add(x, self._ff(f"{p}.ff", self._norm(f"{p}.ln2", x), "relu"))
        return self._norm("text.ln_out", x), mask

    # -- decoder --------------------------------------------------------------------

    def decoder_forward(self, teacher: np.ndarray, audio_h: nm.Tensor,
                        audio_mask: nm.Tensor, text_h: nm.Tensor | None,
                        text_mask: nm.Tensor | None,
                        teacher_lengths: np.ndarray | None = None) -> nm.Tensor:
        """Teacher-forced decoding: (B, U) sos-prefixed ids to (B, U, V) logits."""
        c = self.config
        teacher = np.asarray(teacher, dtype=np.int64)
        if teacher.ndim == 1:
            teacher = teacher[None]
        batch, u = teacher.shape
        x = nm.embedding(self._p("dec.embed"), nm.Tensor(teacher))
        x = nm.scale(x, math.sqrt(c.embed_dim))
        x = nm.add(x, nm.Tensor(sinusoidal_positions(u, c.embed_dim)[None]))
        causal = np.triu(np.ones((u, u), dtype=bool), k=1)[None, None]
        if teacher_lengths is not None:
            pad = np.arange(u)[None, :] >= np.asarray(teacher_lengths)[:, None]
            causal = causal | pad[:, None, None, :]
        self_mask = nm.Tensor(causal)
        for i in range(c.decoder_layers):
            x = self._decoder_layer(i, x, self_mask, audio_h, audio_mask, text_h, text_mask)
        x = self._norm("dec.ln_out", x)
        return nm.add(nm.matmul(x, self._p("dec.out")), self._p("dec.out_b"))

    def _decoder_layer(self, i: int, x: nm.Tensor, self_mask: nm.Tensor,
                       audio_h: nm.Tensor, audio_mask: nm.Tensor,
                       text_h: nm.Tensor | None, text_mask: nm.Tensor | None) -> nm.Tensor:
        c = self.config
        p = f"dec.{i}"
        heads = c.decoder_heads
        normed = self._norm(f"{p}.ln_self", x)
        s = nm.add(x, self._attend(f"{p}.self", normed, normed, self_mask, heads))
        if c.structure == "pca":
            q = self._norm(f"{p}.ln_cross", s)
            ca = self._attend(f"{p}.cross_audio", q, audio_h, audio_mask, heads)
            ct = self._attend(f"{p}.cross_text", q, text_h, text_mask, heads)
            combined = nm.add(nm.scale(ca, 0.5), nm.scale(ct, 0.5))
            s = nm.add(s, combined)
        elif c.structure == "cca":
            a = nm.add(s, self._attend(f"{p}.cross_audio",
                                       self._norm(f"{p}.ln_cross_audio", s),
                                       audio_h, audio_mask, heads))
            s = nm.add(a, self._attend(f"{p}.cross_text",
                                       self._norm(f"{p}.ln_cross_text", a),
                                       text_h, text_mask, heads))
        else:
            s = nm.add(s, self._attend(f"{p}.cross_audio",
                                       self._norm(f"{p}.ln_cross_audio", s),
                                       audio_h, audio_mask, heads))
        return nm.add(s, self._ff(f"{p}.ff", self._norm(f"{p}.ln_ff", s), "relu"))

    # -- spec-surface single-utterance forward ------------------------------------

    def forward(self, features: np.ndarray, onebest: list[int],
                teacher: list[int]) -> tuple[np.ndarray, np.ndarray]:
        """Joint forward for one utterance.

        `teacher` must be sos-prefixed and eos-terminated. Returns attention
        logits (len(teacher), V), where row u predicts the token after
        teacher[u], and CTC logits (T', V); the CTC branch reads the audio
        encoder output only.
        """
        if not teacher or teacher[0] != SOS_ID or teacher[-1] != EOS_ID:
            raise ModelError("teacher tokens must start with sos and end with eos")
        audio_h, audio_mask, _ = self.audio_encode(features)
        ctc_logits = self.ctc_logits(audio_h)
        text_h = text_mask = None
        if self.config.structure != "audio_only":
            text_h, text_mask = self.text_encode(list(onebest))
        att = self.decoder_forward(np.asarray(teacher), audio_h, audio_mask,
                                   text_h, text_mask)
        return att.data[0], ctc_logits.data[0]

    def ctc_logits(self, audio_h: nm.Tensor) -> nm.Tensor:
        return nm.add(nm.matmul(audio_h, self._p("ctc.w")), self._p("ctc.b"))

    # -- incremental decoding --------------------------------------------------------

    def start_state(self, features: np.ndarray, onebest: list[int]) -> "DecoderState":
        audio_h, audio_mask, _ = self.audio_encode(features)
        text_h = text_mask = None
        if self.config.structure != "audio_only":
            text_h, text_mask = self.text_encode(list(onebest))
        return DecoderState(self, audio_h, audio_mask, text_h, text_mask)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.config.to_file(out / "config.txt")
        nm.save_checkpoint(out / "model.ckpt", self.params)

    @classmethod
    def load(cls, model_dir) -> "AEDModel":
        base = Path(model_dir)
        if not (base / "config.txt").exists():
            raise ModelError(f"missing second-pass model at {base}")
        model = cls(AEDConfig.from_file(base / "config.txt"))
        loaded = nm.load_checkpoint(base / "model.ckpt")
        if set(loaded) != set(model.params):
            raise ModelError("checkpoint parameter names do not match the config")
        for name, arr in loaded.items():
            model.params[name] = nm.Tensor(arr, requires_grad=True, name=name)
        return model


class DecoderState:
    """Incremental decoding state: emitted prefix plus per-layer caches.

    Caches self-attention keys/values and the encoder key/value projections;
    stepping the state equals a full recomputation within 1e-10.
    """

    def __init__(self, model: AEDModel, audio_h: nm.Tensor, audio_mask: nm.Tensor,
                 text_h: nm.Tensor | None, text_mask: nm.Tensor | None):
        self.model = model
        self.audio_h = audio_h
        self.audio_mask = audio_mask
        self.text_h = text_h
        self.text_mask = text_mask
        self.tokens: list[int] = [SOS_ID]
        self._self_kv: list[tuple[np.ndarray, np.ndarray] | None] = \
            [None] * model.config.decoder_layers
        self._enc_kv: dict[str, tuple[nm.Tensor, nm.Tensor]] = {}

    def _encoder_kv(self, prefix: str, enc: nm.Tensor, heads: int):
        if prefix not in self._enc_kv:
            k = self.model._project_heads(enc, f"{prefix}.wk", f"{prefix}.bk", heads)
            v = self.model._project_heads(enc, f"{prefix}.wv", f"{prefix}.bv", heads)
            self._enc_kv[prefix] = (k, v)
        return self._enc_kv[prefix]

    def clone(self) -> "DecoderState":
        dup = DecoderState(self.model, self.audio_h, self.audio_mask,
                           self.text_h, self.text_mask)
        dup.tokens = list(self.tokens)
        dup._self_kv = list(self._self_kv)
        dup._enc_kv = self._enc_kv  # shared, read-only
        return dup

    def step(self, token: int | None = None) -> np.ndarray:
        """Feed one token (the initial call consumes sos) and return
        log-probabilities over the vocabulary for the next position."""
        model = self.model
        c = model.config
        if token is not None:
            self.tokens.append(int(token))
        tok = self.tokens[-1]
        x = nm.embedding(model._p("dec.embed"), nm.Tensor(np.array([[tok]], dtype=np.int64)))
        x = nm.scale(x, math.sqrt(c.embed_dim))
        pos = len(self.tokens) - 1
        x = nm.add(x, nm.Tensor(sinusoidal_positions(pos + 1, c.embed_dim)[None, pos:pos + 1]))
        heads = c.decoder_heads
        for i in range(c.decoder_layers):
            p = f"dec.{i}"
            normed = model._norm(f"{p}.ln_self", x)
            k_new = model._project_heads(normed, f"{p}.self.wk", f"{p}.self.bk", heads)
            v_new = model._project_heads(normed, f"{p}.self.wv", f"{p}.self.bv", heads)
            cached = self._self_kv[i]
            if cached is None:
                k_all, v_all = k_new, v_new
            else:
                k_all = nm.concat([nm.Tensor(cached[0]), k_new], axis=2)
                v_all = nm.concat([nm.Tensor(cached[1]), v_new], axis=2)
            self._self_kv[i] = (k_all.data, v_all.data)
            s = nm.add(x, model._attend(f"{p}.self", normed, None, None, heads,
                                        k_cached=k_all, v_cached=v_all))
            if c.structure == "pca":
                q = model._norm(f"{p}.ln_cross", s)
                ka, va = self._encoder_kv(f"{p}.cross_audio", self.audio_h, heads)
                ca = model._attend(f"{p}.cross_audio", q, None, self.audio_mask, heads,
                                   k_cached=ka, v_cached=va)
                kt, vt = self._encoder_kv(f"{p}.cross_text", self.text_h, heads)
                ct = model._attend(f"{p}.cross_text", q, None, self.text_mask, heads,
                                   k_cached=kt, v_cached=vt)
                s = nm.add(s, nm.add(nm.scale(ca, 0.5), nm.scale(ct, 0.5)))
            elif c.structure == "cca":
                ka, va = self._encoder_kv(f"{p}.cross_audio", self.audio_h, heads)
                a = nm.add(s, model._attend(f"{p}.cross_audio",
                                            model._norm(f"{p}.ln_cross_audio", s),
                                            None, self.audio_mask, heads,
                                            k_cached=ka, v_cached=va))
                kt, vt = self._encoder_kv(f"{p}.cross_text", self.text_h, heads)
                s = nm.add(a, model._attend(f"{p}.cross_text",
                                            model._norm(f"{p}.ln_cross_text", a),
                                            None, self.text_mask, heads,
                                            k_cached=kt, v_cached=vt))
            else:
                ka, va = self._encoder_kv(f"{p}.cross_audio", self.audio_h, heads)
                s = nm.add(s, model._attend(f"{p}.cross_audio",
                                            model._norm(f"{p}.ln_cross_audio", s),
                                            None, self.audio_mask, heads,
                                            k_cached=ka, v_cached=va))
            x = nm.add(s, model._ff(f"{p}.ff", model._norm(f"{p}.ln_ff", s), "relu"))
        x = model._norm("dec.ln_out", x)
        logits = nm.add(nm.matmul(x, model._p("dec.out")), model._p("dec.out_b"))
        self.position = len(self.tokens) - 1
        return nm.log_softmax(logits, axis=-1).data[0, 0]
