"""Stage functions that glue the modules together, plus the experiment runner.

``run_experiment`` keeps every stage output under a directory named by a
digest of the configuration that produced it, and writes a ``DONE`` marker
last; a rerun skips stages whose marker exists, so an interrupted run
resumes where it stopped.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .adapt import AdaptConfig, adapt_frontend
from .config import SYSTEMS, RunConfig, system_adapt
from .corpus import Manifest, generate_corpus, holdout_split, load_audio, load_manifest, save_manifest
from .decode import Hypothesis, beam_search, read_hypotheses, write_hypotheses
from .frontend import CmvnStats, cmvn_accumulate, cmvn_apply, cmvn_utterance, extract_features, \
    read_archive, write_archive
from .model import ModelConfig
from .scoring import ScoreReport, bucket_report
from .speaker_embed import EmbeddingStore, SpeakerEmbedding, TrainedEmbedder, extract_utterance_embedding, \
    speaker_embedding, train_embedder
from .tokenizer import Tokenizer
from .trainer import Example, load_checkpoint, model_from_checkpoint, train
from .utils import config_digest

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- features

def extract_manifest(manifest: Manifest, pitch_mode: str = "nccf") -> dict[str, np.ndarray]:
    return {r.utt_id: extract_features(load_audio(r), manifest.sample_rate, pitch_mode).data
            for r in manifest.records}


def normalize_features(feats: Mapping[str, np.ndarray], stats: CmvnStats | None,
                       mode: str = "global") -> dict[str, np.ndarray]:
    if mode == "utterance":
        return {u: cmvn_utterance(x) for u, x in feats.items()}
    if stats is None:
        raise ValueError("global CMVN needs stats")
    return {u: cmvn_apply(x, stats) for u, x in feats.items()}


# -------------------------------------------------------------- embeddings

def embed_manifest(embedder: TrainedEmbedder, manifest: Manifest, feats: Mapping[str, np.ndarray],
                   speaker_manifest: Manifest) -> list[SpeakerEmbedding]:
    """Utterance-scope vectors for every record, speaker-scope means over ``speaker_manifest``."""
    utt = {r.utt_id: extract_utterance_embedding(embedder, feats[r.utt_id], r.utt_id, r.speaker_id)
           for r in manifest.records}
    out = list(utt.values())
    for spk in speaker_manifest.speakers:
        members = [utt[r.utt_id] for r in speaker_manifest.records if r.speaker_id == spk]
        out.append(speaker_embedding(members))
    return out


def build_examples(manifest: Manifest, feats: Mapping[str, np.ndarray], tokenizer: Tokenizer,
                   store: EmbeddingStore | None = None, scope: str = "speaker") -> list[Example]:
    examples = []
    for r in manifest.records:
        emb = None
        if store is not None:
            emb = store.get(r.speaker_id if scope == "speaker" else r.utt_id, scope)
        examples.append(Example(r.utt_id, feats[r.utt_id], tokenizer.encode(r.transcript), emb))
    return examples


# ------------------------------------------------------------------ decode

def decode_manifest(model, manifest: Manifest, feats: Mapping[str, np.ndarray], tokenizer: Tokenizer,
                    adapt: AdaptConfig, store: EmbeddingStore | None = None, beam: int = 4,
                    ctc_weight: float = 0.3, max_len_ratio: float = 0.0) -> list[Hypothesis]:
    """Decode every record with utterance-scope embeddings."""
    hyps = []
    dtype = next(model.parameters()).dtype
    for r in manifest.records:
        emb = store.get(r.utt_id, "utterance") if adapt.mode != "none" else None
        with torch.no_grad():
            x = adapt_frontend(feats[r.utt_id], emb, adapt, model.proj, None, training=False)
        ids, score, _, _ = beam_search(model, x.to(dtype), beam=beam, ctc_weight=ctc_weight,
                                       max_len_ratio=max_len_ratio)[0]
        hyps.append(Hypothesis(r.utt_id, ids, tokenizer.decode(ids), score, r.duration_s))
    return hyps


# -------------------------------------------------------------- experiment

def _stage(root: Path, name: str, key: object, fn: Callable[[Path], None]) -> Path:
    """Run ``fn(dir)`` unless ``root/name-<digest(key)>/DONE`` already exists."""
    d = root / f"{name}-{config_digest(key)}"
    if (d / "DONE").exists():
        log.info("stage %s: reusing %s", name, d)
        return d
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    try:
        fn(d)
    except Exception as e:
        raise StageError(name, e) from e
    (d / "DONE").write_text("")
    return d


def score_unit(tokenizer_mode: str) -> str:
    return "char" if tokenizer_mode == "char" else "word"


def run_experiment(cfg: RunConfig, run_dir: str | Path) -> ScoreReport:
    """Run the system matrix in ``cfg.systems``; writes reports under ``run_dir/reports``."""
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    cfg.save(run / "config.json")
    torch.set_num_threads(max(1, cfg.threads))
    work = run / "stages"

    # corpus
    if cfg.manifest:
        corpus_dir = Path(cfg.manifest).parent
        manifest_path = Path(cfg.manifest)
    else:
        corpus_dir = _stage(work, "corpus", cfg.corpus.to_json(),
                            lambda d: generate_corpus(cfg.corpus, d, workers=cfg.threads))
        manifest_path = corpus_dir / "manifest.tsv"
    try:
        manifest = load_manifest(manifest_path)
    except Exception as e:
        raise StageError("corpus", e) from e
    train_m, dev_m = holdout_split(manifest, cfg.holdout_per_speaker)
    if not len(dev_m) or not len(train_m):
        raise StageError("split", ValueError("held-out or training set is empty"))

    # features
    feat_key = {"manifest": str(manifest_path.resolve()), "pitch": cfg.pitch, "cmvn": cfg.cmvn,
                "holdout": cfg.holdout_per_speaker}

    def _features(d: Path):
        raw = extract_manifest(manifest, cfg.pitch)
        stats = cmvn_accumulate(*(raw[r.utt_id] for r in train_m.records))
        stats.save(d / "cmvn.json")
        write_archive(d / "feats", normalize_features(raw, stats, cfg.cmvn))

    feat_dir = _stage(work, "features", feat_key, _features)
    feats = read_archive(feat_dir / "feats")
    if cfg.tokenizer == "char":
        tokenizer = Tokenizer.from_texts(r.transcript for r in manifest.records)
    else:
        tokenizer = Tokenizer.from_file(cfg.tokenizer)

    # embeddings per flavour
    stores: dict[str, EmbeddingStore] = {}
    for flavor in sorted({SYSTEMS[s][1] for s in cfg.systems} - {None}):
        ecfg = replace(cfg.embedder, flavor=flavor, seed=cfg.seed)

        def _embed(d: Path, ecfg=ecfg):
            train_feats = {r.utt_id: feats[r.utt_id] for r in train_m.records}
            emb = train_embedder(train_feats, {r.utt_id: r.speaker_id for r in train_m.records}, ecfg)
            emb.save(d / "embedder.pt")
            (d / "embedder.json").write_text(json.dumps({"train_accuracy": emb.train_accuracy,
                                                         "loss": emb.history}, indent=1) + "\n")
            EmbeddingStore(d / "store").put_many(embed_manifest(emb, manifest, feats, train_m))

        edir = _stage(work, f"embed_{flavor}", {"features": feat_key, "embedder": ecfg.__dict__}, _embed)
        stores[flavor] = EmbeddingStore(edir / "store")

    # train + decode per system
    results: dict[str, dict[str, str]] = {}
    for system in cfg.systems:
        mode, flavor = SYSTEMS[system]
        adapt = system_adapt(cfg, system)
        tcfg = replace(cfg.train, adapt=adapt, seed=cfg.seed)
        mcfg = ModelConfig.preset(cfg.model.preset, len(tokenizer), adapt_mode=mode, **cfg.model.overrides())
        store = stores.get(flavor)
        key = {"features": feat_key, "embedder": replace(cfg.embedder, flavor=flavor or "ff", seed=cfg.seed).__dict__
               if flavor else None, "model": mcfg.to_dict(), "train": tcfg.to_dict()}

        def _train(d: Path, tcfg=tcfg, mcfg=mcfg, store=store):
            tr = build_examples(train_m, feats, tokenizer, store, "speaker")
            dv = build_examples(dev_m, feats, tokenizer, store, "utterance")
            train(tr, dv, mcfg, tcfg, out_dir=d, vocab=tokenizer.tokens)

        tdir = _stage(work, f"train_{system}", key, _train)
        dkey = {"train": key, "decode": cfg.decode.__dict__}

        def _decode(d: Path, tdir=tdir, adapt=adapt, store=store):
            model = model_from_checkpoint(load_checkpoint(tdir / "model.avg.pt"))
            hyps = decode_manifest(model, dev_m, feats, tokenizer, adapt, store, cfg.decode.beam,
                                   cfg.decode.ctc_weight, cfg.decode.max_len_ratio)
            write_hypotheses(d / "hyp.txt", hyps)

        ddir = _stage(work, f"decode_{system}", dkey, _decode)
        results[system] = {u: text for u, (_, text) in read_hypotheses(ddir / "hyp.txt").items()}

    refs = {r.utt_id: r.transcript for r in dev_m.records}
    report = bucket_report(results, refs, dev_m, cfg.edges, unit=score_unit(tokenizer.mode))
    out = run / "reports"
    out.mkdir(exist_ok=True)
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    for system in cfg.systems:
        single = ScoreReport([system], report.buckets, report.edges,
                             {k: v for k, v in report.counts.items() if k[0] == system}, report.unit)
        (out / f"{system}.csv").write_text(single.to_csv(), encoding="utf-8")
    save_manifest(dev_m, run / "reports" / "eval_manifest.tsv")
    return report
