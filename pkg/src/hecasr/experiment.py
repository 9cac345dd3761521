"""Experiment runner: combination, robustness, and biasing studies.

Each experiment trains the full cascade from scratch for every seed on a
synthetic corpus and reports WER (and relative reductions) per test
condition, as an aligned text table plus a machine-readable tab-separated
twin. Reports are byte-identical given identical config and seeds.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .corpus import (CorpusSpec, Dataset, Tokenizer, generate_lm_text, generate_split)
from .decode_eval import joint_beam_search, wer, werr
from .first_pass import (HybridModel, NBestCache, build_nbest_cache, decode_utterance,
                         speech_only)
from .ngram import bias_lm
from .second_pass import AEDModel, desk_preset
from .train import TrainConfig, train_first_pass, train_second_pass

WORDS = ("aded", "bdl", "ce", "dfg", "djli", "dka", "eb", "ec", "fd", "fg",
         "fgk", "gea", "gic", "gji", "ha", "hg", "hgdc", "hl", "iei", "ij",
         "ijfb", "ja", "jclj", "jf", "jfe", "jh", "jk", "ka", "kafj", "kge",
         "kh", "kjal", "kl", "lak", "lclb", "ldh", "lgk", "lh", "lj", "ljfi")
ENTITIES = ("abjb", "eha", "gbie", "hle")

EXPERIMENT_KINDS = ("combination", "robustness", "biasing")
TEST_SPLITS = ("matched", "dialect", "accent")


class ExperimentError(Exception):
    pass


@dataclass
class ExperimentConfig:
    kind: str = "combination"
    seeds: tuple[int, ...] = (0, 1, 2)
    corpus_seed: int = 101
    train_count: int = 2000
    test_count: int = 250
    first_pass_epochs: int = 6
    second_pass_epochs: int = 12
    batch_size: int = 16
    lr_peak: float = 3e-3
    warmup_steps: int = 200
    nbest_beam: int = 8
    nbest_n: int = 4
    lm_scale: float = 0.5
    decode_beam: int = 5
    bias_boost: float = 4.0
    extra_shifted_count: int = 1000  # robustness: extra data for the new hybrid
    entity_test_count: int = 200     # biasing: entity-bearing test utterances

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ExperimentError(f"experiment kind must be one of {EXPERIMENT_KINDS}")
        if isinstance(self.seeds, str):
            self.seeds = tuple(int(s) for s in self.seeds.split(",") if s)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ExperimentError("at least one seed is required")

    def to_file(self, path) -> None:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(s) for s in v)
            lines.append(f"{f.name} = {v}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        raw = {}
        for ln in Path(path).read_text(encoding="utf-8").splitlines():
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            if "=" not in ln:
                raise ExperimentError(f"bad config line: {ln!r}")
            k, v = (p.strip() for p in ln.split("=", 1))
            raw[k] = v
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw.pop(f.name)
            if f.name == "kind":
                kwargs[f.name] = v
            elif f.name == "seeds":
                kwargs[f.name] = tuple(int(s) for s in v.split(",") if s)
            elif f.type == "float":
                kwargs[f.name] = float(v)
            else:
                kwargs[f.name] = int(v)
        if raw:
            raise ExperimentError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs)


def default_corpus_spec(seed: int, train_count: int = 2000,
                        test_count: int = 250) -> CorpusSpec:
    """The calibrated desk corpus used by the experiments."""
    return CorpusSpec(seed=seed, words=WORDS, entities=ENTITIES,
                      train_count=train_count, test_count=test_count)


# ---------------------------------------------------------------------------
# one-seed pipeline
# ---------------------------------------------------------------------------

@dataclass
class Cascade:
    """Everything trained for one seed."""
    tokenizer: Tokenizer
    hybrid: HybridModel
    cache: NBestCache
    second: dict[str, AEDModel] = field(default_factory=dict)  # structure -> model


def train_cascade(spec: CorpusSpec, train_set: Dataset, cfg: ExperimentConfig,
                  seed: int, structures: tuple[str, ...],
                  hybrid: HybridModel | None = None,
                  log_fn=None) -> Cascade:
    tokenizer = spec.tokenizer()
    if hybrid is None:
        fp_cfg = TrainConfig(epochs=cfg.first_pass_epochs, batch_size=256,
                             lr_peak=2e-3, warmup_steps=100, seed=seed)
        hybrid, _ = train_first_pass(train_set, tokenizer, fp_cfg,
                                     lm_texts=generate_lm_text(spec),
                                     lm_scale=cfg.lm_scale)
    cache = build_nbest_cache(hybrid, train_set, beam=cfg.nbest_beam, n=cfg.nbest_n)
    cascade = Cascade(tokenizer=tokenizer, hybrid=hybrid, cache=cache)
    sp_cfg = TrainConfig(epochs=cfg.second_pass_epochs, batch_size=cfg.batch_size,
                         lr_peak=cfg.lr_peak, warmup_steps=cfg.warmup_steps, seed=seed)
    for structure in structures:
        aed_cfg = desk_preset(tokenizer.vocab_size, spec.feature_dim, structure)
        model, _ = train_second_pass(train_set, cache, aed_cfg, sp_cfg, tokenizer,
                                     seg_cfg=hybrid.segmenter, log_fn=log_fn)
        cascade.second[structure] = model
    return cascade


def decode_hybrid(hybrid: HybridModel, dataset: Dataset, beam: int, n: int = 1,
                  lm=None) -> dict[str, tuple[int, ...]]:
    hyps = {}
    for utt in dataset:
        entries, _, _ = decode_utterance(hybrid, utt.features, beam=beam, n=n, lm=lm)
        hyps[utt.id] = entries[0].tokens
    return hyps


def decode_second(model: AEDModel, hybrid: HybridModel, dataset: Dataset,
                  beam: int, onebests: dict[str, tuple[int, ...]] | None = None
                  ) -> dict[str, tuple[int, ...]]:
    """Joint beam search over segmented speech; `onebests` supplies the text
    conditioning (ignored by audio-only models)."""
    hyps = {}
    for utt in dataset:
        feats = speech_only(utt.features, hybrid.segmenter)
        if feats.shape[0] < 4:
            hyps[utt.id] = ()
            continue
        onebest = [] if model.config.structure == "audio_only" or onebests is None \
            else list(onebests[utt.id])
        hyp = joint_beam_search(model, feats, onebest, beam=beam)
        hyps[utt.id] = hyp.tokens
    return hyps


def references(dataset: Dataset, tokenizer: Tokenizer) -> dict[str, list[int]]:
    return {u.id: tokenizer.encode(u.transcript) for u in dataset}


def weighted_average(split_wers: dict[str, float], token_counts: dict[str, int]) -> float:
    total = sum(token_counts[s] for s in split_wers)
    return sum(split_wers[s] * token_counts[s] for s in split_wers) / total


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

SYSTEMS = ("hybrid", "aed", "hec_pca", "hec_cca")


def _combination_seed(cfg: ExperimentConfig, seed: int) -> dict:
    spec = default_corpus_spec(cfg.corpus_seed, cfg.train_count, cfg.test_count)
    train_set = generate_split(spec, "train", spec.train_count)
    tests = {s: generate_split(spec, s, spec.test_count) for s in TEST_SPLITS}
    cascade = train_cascade(spec, train_set, cfg, seed,
                            structures=("pca", "cca", "audio_only"))
    tok = cascade.tokenizer
    wers: dict[str, dict[str, float]] = {s: {} for s in TEST_SPLITS}
    counts: dict[str, int] = {}
    for split, ds in tests.items():
        refs = references(ds, tok)
        counts[split] = sum(len(r) for r in refs.values())
        fp_hyps = decode_hybrid(cascade.hybrid, ds, beam=cfg.nbest_beam)
        wers[split]["hybrid"] = wer(refs, fp_hyps)
        wers[split]["aed"] = wer(refs, decode_second(
            cascade.second["audio_only"], cascade.hybrid, ds, cfg.decode_beam))
        wers[split]["hec_pca"] = wer(refs, decode_second(
            cascade.second["pca"], cascade.hybrid, ds, cfg.decode_beam, fp_hyps))
        wers[split]["hec_cca"] = wer(refs, decode_second(
            cascade.second["cca"], cascade.hybrid, ds, cfg.decode_beam, fp_hyps))
    weighted = {sys: weighted_average({s: wers[s][sys] for s in TEST_SPLITS}, counts)
                for sys in SYSTEMS}
    return {"seed": seed, "split_wers": wers, "weighted": weighted, "counts": counts}


def _robustness_seed(cfg: ExperimentConfig, seed: int) -> dict:
    spec = default_corpus_spec(cfg.corpus_seed, cfg.train_count, cfg.test_count)
    train_set = generate_split(spec, "train", spec.train_count)
    tests = {s: generate_split(spec, s, spec.test_count) for s in TEST_SPLITS}
    # extra dialect/accent-flavoured training data for the updated hybrid
    extra_d = generate_split(spec, "dialect", cfg.extra_shifted_count // 2, stream=7)
    extra_a = generate_split(spec, "accent", cfg.extra_shifted_count // 2, stream=7)
    new_train = Dataset(name="train+shifted",
                        utterances=list(train_set) + list(extra_d) + list(extra_a))
    tok = spec.tokenizer()

    cascade = train_cascade(spec, train_set, cfg, seed, structures=("pca",))
    fp_cfg = TrainConfig(epochs=cfg.first_pass_epochs, batch_size=256, lr_peak=2e-3,
                         warmup_steps=100, seed=seed)
    new_hybrid, _ = train_first_pass(new_train, tok, fp_cfg,
                                     lm_texts=generate_lm_text(spec),
                                     lm_scale=cfg.lm_scale)
    model = cascade.second["pca"]
    wers: dict[str, dict[str, float]] = {s: {} for s in TEST_SPLITS}
    counts: dict[str, int] = {}
    for split, ds in tests.items():
        refs = references(ds, tok)
        counts[split] = sum(len(r) for r in refs.values())
        old_hyps = decode_hybrid(cascade.hybrid, ds, beam=cfg.nbest_beam)
        new_hyps = decode_hybrid(new_hybrid, ds, beam=cfg.nbest_beam)
        wers[split]["hybrid_old"] = wer(refs, old_hyps)
        wers[split]["hybrid_new"] = wer(refs, new_hyps)
        wers[split]["hec_old"] = wer(refs, decode_second(
            model, cascade.hybrid, ds, cfg.decode_beam, old_hyps))
        wers[split]["hec_new"] = wer(refs, decode_second(
            model, new_hybrid, ds, cfg.decode_beam, new_hyps))
    systems = ("hybrid_old", "hybrid_new", "hec_old", "hec_new")
    weighted = {sys: weighted_average({s: wers[s][sys] for s in TEST_SPLITS}, counts)
                for sys in systems}
    return {"seed": seed, "split_wers": wers, "weighted": weighted, "counts": counts}


def entity_recall(dataset: Dataset, hyps: dict[str, tuple[int, ...]],
                  tokenizer: Tokenizer, entities) -> float:
    """Fraction of reference entity occurrences whose character sequence
    appears contiguously in the hypothesis."""
    hits = total = 0
    ent_ids = {e: tuple(tokenizer.encode(e)) for e in entities}
    for utt in dataset:
        hyp = tuple(hyps[utt.id])
        for ent, ids in ent_ids.items():
            occurrences = _count_occurrences(tuple(tokenizer.encode(utt.transcript)), ids)
            if not occurrences:
                continue
            found = _count_occurrences(hyp, ids)
            total += occurrences
            hits += min(found, occurrences)
    if total == 0:
        raise ExperimentError("entity test set contains no entity occurrences")
    return hits / total


def _count_occurrences(seq: tuple[int, ...], sub: tuple[int, ...]) -> int:
    if not sub or len(sub) > len(seq):
        return 0
    return sum(1 for i in range(len(seq) - len(sub) + 1) if seq[i:i + len(sub)] == sub)


def _biasing_seed(cfg: ExperimentConfig, seed: int) -> dict:
    spec = default_corpus_spec(cfg.corpus_seed, cfg.train_count, cfg.test_count)
    train_set = generate_split(spec, "train", spec.train_count)
    entity_set = generate_split(spec, "entity", cfg.entity_test_count)
    cascade = train_cascade(spec, train_set, cfg, seed, structures=("pca",))
    tok = cascade.tokenizer
    model = cascade.second["pca"]
    phrases = [tok.encode(e) for e in spec.entities]
    biased = bias_lm(cascade.hybrid.lm, phrases, cfg.bias_boost)

    refs = references(entity_set, tok)
    out: dict[str, float] = {"seed": seed}
    hyps_first = {}
    for tag, lm in (("unbiased", None), ("biased", biased)):
        fp = decode_hybrid(cascade.hybrid, entity_set, beam=cfg.nbest_beam, lm=lm)
        hyps_first[tag] = fp
        out[f"first_recall_{tag}"] = entity_recall(entity_set, fp, tok, spec.entities)
        out[f"first_wer_{tag}"] = wer(refs, fp)
        hec = decode_second(model, cascade.hybrid, entity_set, cfg.decode_beam, fp)
        out[f"hec_recall_{tag}"] = entity_recall(entity_set, hec, tok, spec.entities)
        out[f"hec_wer_{tag}"] = wer(refs, hec)
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    kind: str
    seeds: tuple[int, ...]
    per_seed: list[dict]
    mean: dict
    text: str
    tsv: str

    def save(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.text, encoding="utf-8")
        (out / "report.tsv").write_text(self.tsv, encoding="utf-8")
        return {"text": out / "report.txt", "tsv": out / "report.tsv"}


def _mean_nested(dicts: list[dict]) -> dict:
    """Element-wise mean over identically shaped nested dicts of floats."""
    first = dicts[0]
    if isinstance(first, dict):
        return {k: _mean_nested([d[k] for d in dicts]) for k in first}
    return float(np.mean(dicts))


def _fmt_combination(cfg: ExperimentConfig, per_seed: list[dict], mean: dict) -> tuple[str, str]:
    buf = io.StringIO()
    tsv = io.StringIO()
    header = f"{'test set':<10}" + "".join(f"{s:>10}" for s in SYSTEMS) \
        + f"{'WERR/hyb':>10}{'WERR/aed':>10}"
    tsv.write("section\ttest_set\t" + "\t".join(SYSTEMS) + "\twerr_pca_vs_hybrid\twerr_pca_vs_aed\n")

    def table(tag: str, wers: dict, weighted: dict):
        buf.write(f"[{tag}]\n{header}\n")
        rows = [(s, wers[s]) for s in TEST_SPLITS] + [("weighted", weighted)]
        for name, row in rows:
            wr_h = werr(row["hybrid"], row["hec_pca"])
            wr_a = werr(row["aed"], row["hec_pca"])
            buf.write(f"{name:<10}" + "".join(f"{row[s]:>10.2f}" for s in SYSTEMS)
                      + f"{wr_h:>10.1f}{wr_a:>10.1f}\n")
            tsv.write(f"{tag}\t{name}\t" + "\t".join(f"{row[s]:.4f}" for s in SYSTEMS)
                      + f"\t{wr_h:.1f}\t{wr_a:.1f}\n")
        buf.write("\n")

    for rec in per_seed:
        table(f"seed {rec['seed']}", rec["split_wers"],
              rec["weighted"])
    table(f"mean of seeds {','.join(str(s) for s in cfg.seeds)}",
          mean["split_wers"], mean["weighted"])
    return buf.getvalue(), tsv.getvalue()


def _fmt_robustness(cfg: ExperimentConfig, per_seed: list[dict], mean: dict) -> tuple[str, str]:
    systems = ("hybrid_old", "hybrid_new", "hec_old", "hec_new")
    buf = io.StringIO()
    tsv = io.StringIO()
    header = f"{'test set':<10}" + "".join(f"{s:>12}" for s in systems)
    tsv.write("section\ttest_set\t" + "\t".join(systems) + "\n")

    def table(tag: str, wers: dict, weighted: dict):
        buf.write(f"[{tag}]\n{header}\n")
        rows = [(s, wers[s]) for s in TEST_SPLITS] + [("weighted", weighted)]
        for name, row in rows:
            buf.write(f"{name:<10}" + "".join(f"{row[s]:>12.2f}" for s in systems) + "\n")
            tsv.write(f"{tag}\t{name}\t" + "\t".join(f"{row[s]:.4f}" for s in systems) + "\n")
        buf.write("\n")

    for rec in per_seed:
        table(f"seed {rec['seed']}", rec["split_wers"], rec["weighted"])
    table(f"mean of seeds {','.join(str(s) for s in cfg.seeds)}",
          mean["split_wers"], mean["weighted"])
    return buf.getvalue(), tsv.getvalue()


def _fmt_biasing(cfg: ExperimentConfig, per_seed: list[dict], mean: dict) -> tuple[str, str]:
    keys = ("first_recall_unbiased", "first_recall_biased",
            "hec_recall_unbiased", "hec_recall_biased",
            "first_wer_unbiased", "first_wer_biased",
            "hec_wer_unbiased", "hec_wer_biased")
    buf = io.StringIO()
    tsv = io.StringIO()
    tsv.write("section\t" + "\t".join(keys) + "\n")

    def table(tag: str, rec: dict):
        buf.write(f"[{tag}]\n")
        for k in keys:
            buf.write(f"  {k:<24} {rec[k]:.4f}\n")
        tsv.write(f"{tag}\t" + "\t".join(f"{rec[k]:.4f}" for k in keys) + "\n")
        buf.write("\n")

    for rec in per_seed:
        table(f"seed {rec['seed']}", rec)
    table(f"mean of seeds {','.join(str(s) for s in cfg.seeds)}", mean)
    return buf.getvalue(), tsv.getvalue()


def run_experiment(cfg: ExperimentConfig, log_fn=None) -> ExperimentReport:
    """Run the configured experiment over all seeds and build the report."""
    runner = {"combination": _combination_seed, "robustness": _robustness_seed,
              "biasing": _biasing_seed}[cfg.kind]
    per_seed = []
    for seed in cfg.seeds:
        if log_fn:
            log_fn(f"running {cfg.kind} experiment, seed {seed}")
        per_seed.append(runner(cfg, seed))
    mean = _mean_nested([{k: v for k, v in rec.items() if k not in ("seed", "counts")}
                         for rec in per_seed])
    fmt = {"combination": _fmt_combination, "robustness": _fmt_robustness,
           "biasing": _fmt_biasing}[cfg.kind]
    text, tsv = fmt(cfg, per_seed, mean)
    return ExperimentReport(kind=cfg.kind, seeds=cfg.seeds, per_seed=per_seed,
                            mean=mean, text=text, tsv=tsv)
