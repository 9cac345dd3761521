"""Synthetic audio-like corpora with controlled distribution shifts.

Utterances are built by concatenating per-word feature templates (derived
from per-character prototype frames) between stretches of near-silent
frames, plus additive Gaussian noise. Three test conditions mirror a
matched set, a dialect-shifted set (template offset + lexical skew), and
an accent-shifted set (stronger template offset, low noise). A separate
text-only corpus, drawn from a broader lexical distribution than the
paired training data, is emitted for language-model training.

File formats
------------
manifest.tsv   one line per utterance: id <TAB> transcript <TAB> feature path
feature file   little-endian u32 T, u32 D, then T*D float32, row-major
spec file      flat key=value lines
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

BLANK_ID = 0
UNK_ID = 1
SOS_ID = 2
EOS_ID = 3
_RESERVED = 4
UNK_MARKER = "<unk>"


class CorpusError(Exception):
    pass


class Tokenizer:
    """Character symbol table with reserved ids blank=0, unk=1, sos=2, eos=3."""

    def __init__(self, symbols):
        ordered = sorted(set(symbols))
        if any(len(s) != 1 for s in ordered):
            raise CorpusError("tokenizer symbols must be single characters")
        self.symbols = ordered
        self._to_id = {s: _RESERVED + i for i, s in enumerate(ordered)}
        self._to_sym = {v: k for k, v in self._to_id.items()}

    @property
    def vocab_size(self) -> int:
        return _RESERVED + len(self.symbols)

    def encode(self, text: str) -> list[int]:
        """Per-character ids; unknown characters map to unk. No sos/eos/blank."""
        return [self._to_id.get(ch, UNK_ID) for ch in text]

    def decode(self, ids) -> str:
        """Inverse of encode. blank/sos/eos render empty, unk as a marker."""
        out = []
        for i in ids:
            i = int(i)
            if i in (BLANK_ID, SOS_ID, EOS_ID):
                continue
            if i == UNK_ID:
                out.append(UNK_MARKER)
                continue
            sym = self._to_sym.get(i)
            if sym is None:
                raise CorpusError(f"token id {i} outside symbol table")
            out.append(sym)
        return "".join(out)

    def save(self, path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


@dataclass
class CorpusSpec:
    """Everything needed to synthesize a corpus deterministically."""

    seed: int = 0
    feature_dim: int = 16
    words: tuple[str, ...] = ()
    entities: tuple[str, ...] = ()
    word_weight_exponent: float = 1.0   # Zipf exponent over word rank
    entity_weight: float = 0.002        # total train probability mass on entities
    # 5 frames per character keeps character targets CTC-feasible after the
    # second pass subsamples time by 4 (T' ~ 1.25 L vs the L + repeats floor)
    frames_per_char: int = 5
    min_words: int = 2
    max_words: int = 3
    template_jitter: float = 0.15       # fixed per-position wobble within a template
    noise_level: float = 0.6
    silence_min: int = 3
    silence_max: int = 8
    silence_noise: float = 0.01
    gap_probability: float = 0.75       # chance of a short silence between two words
    gap_min: int = 2
    gap_max: int = 4
    long_gap_probability: float = 0.15  # chance the gap is long (splits the utterance)
    long_gap_min: int = 8
    long_gap_max: int = 14
    dialect_template_shift: float = 0.3
    dialect_lexical_mix: float = 0.8    # 0 = train distribution, 1 = uniform
    accent_template_shift: float = 0.55
    accent_noise: float = 0.15
    train_count: int = 2000
    test_count: int = 250
    lm_text_count: int = 8000
    lm_text_mix: float = 0.5

    def __post_init__(self):
        self.words = tuple(self.words)
        self.entities = tuple(self.entities)
        if not self.words:
            raise CorpusError("corpus vocabulary must not be empty")
        for p in ("dialect_template_shift", "accent_template_shift",
                  "noise_level", "accent_noise", "entity_weight"):
            if getattr(self, p) < 0:
                raise CorpusError(f"{p} must be >= 0")
        if self.frames_per_char < 1 or self.feature_dim < 1:
            raise CorpusError("frames_per_char and feature_dim must be positive")

    @property
    def all_words(self) -> tuple[str, ...]:
        return self.words + self.entities

    def charset(self) -> set[str]:
        return set("".join(self.all_words))

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.charset())

    # -- key=value round trip ------------------------------------------------

    def to_file(self, path) -> None:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            lines.append(f"{f.name} = {v}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path) -> "CorpusSpec":
        raw = {}
        for ln in Path(path).read_text(encoding="utf-8").splitlines():
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            if "=" not in ln:
                raise CorpusError(f"bad spec line: {ln!r}")
            key, val = (part.strip() for part in ln.split("=", 1))
            raw[key] = val
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            val = raw.pop(f.name)
            if f.type in ("int",):
                kwargs[f.name] = int(val)
            elif f.type in ("float",):
                kwargs[f.name] = float(val)
            elif f.name in ("words", "entities"):
                kwargs[f.name] = tuple(w for w in val.split(",") if w)
            else:
                kwargs[f.name] = val
        if raw:
            raise CorpusError(f"unknown spec keys: {sorted(raw)}")
        return cls(**kwargs)

    # -- templates -----------------------------------------------------------

    def char_prototypes(self) -> dict[str, np.ndarray]:
        """Per-character prototype frames (frames_per_char x D), seed-derived.

        Each character is quasi-stationary: one base frame tiled over the
        template plus a small fixed per-position jitter.
        """
        rng = _rng(self.seed, 1)
        protos = {}
        for ch in sorted(self.charset()):
            base = rng.normal(0.0, 1.0, size=(1, self.feature_dim))
            jitter = rng.normal(0.0, self.template_jitter,
                                size=(self.frames_per_char, self.feature_dim))
            protos[ch] = base + jitter
        return protos

    def word_template(self, word: str, protos: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Word template: concatenation of its characters' prototype frames."""
        protos = protos or self.char_prototypes()
        return np.concatenate([protos[ch] for ch in word], axis=0)


@dataclass
class Utterance:
    id: str
    transcript: str
    features: np.ndarray  # (T, D) float32


@dataclass
class Dataset:
    name: str
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]


SPLIT_CODES = {"train": 10, "matched": 11, "dialect": 12, "accent": 13,
               "entity": 14, "lm_text": 15}


def _rng(seed: int, code: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, code, stream])))


def _word_weights(spec: CorpusSpec, mix_to_uniform: float) -> np.ndarray:
    """Zipf-over-rank weights for regular words, mixed toward uniform,
    with a fixed small slice of mass reserved for entity words."""
    n = len(spec.words)
    base = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** spec.word_weight_exponent
    base /= base.sum()
    uniform = np.full(n, 1.0 / n)
    regular = (1.0 - mix_to_uniform) * base + mix_to_uniform * uniform
    if spec.entities:
        ent = np.full(len(spec.entities), spec.entity_weight / len(spec.entities))
        regular = regular * (1.0 - spec.entity_weight)
        return np.concatenate([regular, ent])
    return regular


def _split_prototypes(spec: CorpusSpec, kind: str) -> dict[str, np.ndarray]:
    """Prototypes for a split: a fixed per-character offset of the given
    magnitude models a systematic acoustic shift."""
    protos = spec.char_prototypes()
    shift = {"train": 0.0, "matched": 0.0, "entity": 0.0, "lm_text": 0.0,
             "dialect": spec.dialect_template_shift,
             "accent": spec.accent_template_shift}[kind]
    if shift == 0.0:
        return protos
    rng = _rng(spec.seed, 2 + SPLIT_CODES[kind])
    shifted = {}
    for ch in sorted(protos):
        direction = rng.normal(size=protos[ch].shape)
        direction /= np.linalg.norm(direction)
        shifted[ch] = protos[ch] + shift * np.sqrt(protos[ch].size) * direction
    return shifted


def _split_params(spec: CorpusSpec, kind: str) -> tuple[float, float]:
    """(noise sigma, lexical mix toward uniform) for a split."""
    if kind in ("train", "matched", "entity"):
        return spec.noise_level, 0.0
    if kind == "dialect":
        return spec.noise_level, spec.dialect_lexical_mix
    if kind == "accent":
        return spec.accent_noise, 0.0
    if kind == "lm_text":
        return 0.0, spec.lm_text_mix
    raise CorpusError(f"unknown split kind: {kind}")


def sample_transcript(spec: CorpusSpec, rng: np.random.Generator,
                      weights: np.ndarray, force_entity: bool = False) -> list[str]:
    n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
    words = list(rng.choice(len(spec.all_words), size=n_words, p=weights))
    words = [spec.all_words[i] for i in words]
    if force_entity and spec.entities:
        pos = int(rng.integers(0, n_words))
        ent = spec.entities[int(rng.integers(0, len(spec.entities)))]
        words[pos] = ent
    return words


def synthesize(spec: CorpusSpec, words: list[str], protos: dict[str, np.ndarray],
               noise: float, rng: np.random.Generator) -> np.ndarray:
    """Render a word sequence to frames: silence, word templates (optional
    inter-word gaps), silence, plus additive Gaussian noise on speech."""
    d = spec.feature_dim
    chunks = [_silence(spec, rng, int(rng.integers(spec.silence_min, spec.silence_max + 1)))]
    for i, w in enumerate(words):
        speech = np.concatenate([protos[ch] for ch in w], axis=0)
        if noise > 0:
            speech = speech + rng.normal(0.0, noise, size=speech.shape)
        chunks.append(speech)
        if i + 1 < len(words) and rng.random() < spec.gap_probability:
            if rng.random() < spec.long_gap_probability:
                gap = int(rng.integers(spec.long_gap_min, spec.long_gap_max + 1))
            else:
                gap = int(rng.integers(spec.gap_min, spec.gap_max + 1))
            chunks.append(_silence(spec, rng, gap))
    chunks.append(_silence(spec, rng, int(rng.integers(spec.silence_min, spec.silence_max + 1))))
    feats = np.concatenate(chunks, axis=0)
    assert feats.shape[1] == d
    return feats.astype(np.float32)


def _silence(spec: CorpusSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.normal(0.0, spec.silence_noise, size=(n, spec.feature_dim))


def generate_split(spec: CorpusSpec, kind: str, count: int, stream: int = 0) -> Dataset:
    """Generate one split deterministically. `stream` decorrelates extra
    draws from the same split kind (e.g. additional shifted training data)."""
    rng = _rng(spec.seed, SPLIT_CODES[kind], stream)
    noise, mix = _split_params(spec, kind)
    weights = _word_weights(spec, mix)
    protos = _split_prototypes(spec, kind)
    ds = Dataset(name=kind if stream == 0 else f"{kind}.{stream}")
    for i in range(count):
        words = sample_transcript(spec, rng, weights, force_entity=(kind == "entity"))
        feats = synthesize(spec, words, protos, noise, rng)
        ds.utterances.append(Utterance(id=f"{ds.name}-{i:05d}",
                                       transcript="".join(words), features=feats))
    return ds


def generate_lm_text(spec: CorpusSpec) -> list[str]:
    """Text-only sentences from a broader lexical distribution than the
    paired training data (stands in for large unpaired text)."""
    rng = _rng(spec.seed, SPLIT_CODES["lm_text"])
    weights = _word_weights(spec, spec.lm_text_mix)
    return ["".join(sample_transcript(spec, rng, weights))
            for _ in range(spec.lm_text_count)]


def generate_corpus(spec: CorpusSpec, out_dir) -> dict[str, Path]:
    """Generate train + matched/dialect/accent test sets, the tokenizer,
    the LM text corpus, and the spec itself, under `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec.to_file(out / "spec.txt")
    spec.tokenizer().save(out / "vocab.txt")
    paths = {"spec": out / "spec.txt", "vocab": out / "vocab.txt"}
    for kind, count in [("train", spec.train_count), ("matched", spec.test_count),
                        ("dialect", spec.test_count), ("accent", spec.test_count)]:
        ds = generate_split(spec, kind, count)
        paths[kind] = write_dataset(ds, out / kind)
    lm_path = out / "lm_text.txt"
    lm_path.write_text("".join(s + "\n" for s in generate_lm_text(spec)), encoding="utf-8")
    paths["lm_text"] = lm_path
    return paths


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def write_features(path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype=np.float32)
    if feats.ndim != 2:
        raise CorpusError(f"features must be (T, D), got {feats.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        fh.write(feats.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise CorpusError(f"{path}: truncated feature header")
        t, d = struct.unpack("<II", header)
        buf = fh.read(t * d * 4)
        if len(buf) != t * d * 4:
            raise CorpusError(f"{path}: truncated feature data")
        return np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(t, d)


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in ds:
        rel = f"feats/{utt.id}.bin"
        write_features(out / rel, utt.features)
        lines.append(f"{utt.id}\t{utt.transcript}\t{rel}")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    return manifest


def read_dataset(manifest_path, name: str | None = None) -> Dataset:
    manifest = Path(manifest_path)
    base = manifest.parent
    ds = Dataset(name=name or base.name)
    for ln in manifest.read_text(encoding="utf-8").splitlines():
        if not ln:
            continue
        parts = ln.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"bad manifest line: {ln!r}")
        utt_id, transcript, rel = parts
        ds.utterances.append(Utterance(id=utt_id, transcript=transcript,
                                       features=read_features(base / rel)))
    return ds
