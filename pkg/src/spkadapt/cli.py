"""``spkadapt`` command line: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage/configuration error, 3 data error,
4 numeric failure (NaN/Inf during training).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from . import config as config_mod
from .adapt import MODES, NORM_AXES, AdaptConfig, ScopeError
from .config import SYSTEMS, ConfigError, RunConfig
from .corpus import CorpusError, CorpusSpec, bucket_names, generate_corpus, load_manifest, parse_edges, \
    save_manifest, split_by_duration
from .decode import DecodeError, read_hypotheses, write_hypotheses
from .frontend import CmvnStats, FrontendError, cmvn_accumulate, read_archive, write_archive
from .model import ModelConfig
from .pipeline import StageError, build_examples, decode_manifest, embed_manifest, extract_manifest, \
    normalize_features, run_experiment
from .scoring import Counts, ScoreReport, ScoringError, bucket_report
from .speaker_embed import EmbeddingNotFound, EmbeddingStore, TrainedEmbedder, train_embedder
from .tokenizer import Tokenizer
from .trainer import NumericError, load_checkpoint, model_from_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("spkadapt")


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _edges(text: str) -> list[float]:
    try:
        return parse_edges(text)
    except CorpusError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _systems(text: str) -> list[str]:
    names = [s for s in text.split(",") if s]
    bad = [s for s in names if s not in SYSTEMS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown system(s) {bad}; valid systems: {', '.join(SYSTEMS)}")
    return names


# flag dest -> dotted RunConfig key
FLAG_KEYS = {
    "seed": "seed", "threads": "threads", "pitch": "pitch", "cmvn_mode": "cmvn",
    "adapt": "train.adapt.mode", "norm": "train.adapt.norm_axis", "specaug_joint": "train.adapt.specaug_joint",
    "norm_after_specaug": None, "specaug": "train.specaug.enabled",
    "epochs": "train.epochs", "warmup": "train.warmup_steps", "lr_factor": "train.lr_factor",
    "batch_bins": "train.batch_bins", "accum_grad": "train.accum_grad", "average_k": "train.average_k",
    "grad_clip": "train.grad_clip", "dtype": "train.dtype",
    "preset": "model.preset", "d_model": "model.d_model", "enc_layers": "model.enc_layers",
    "dec_layers": "model.dec_layers", "heads": "model.heads", "ffn_dim": "model.ffn_dim",
    "conv_channels": "model.conv_channels", "dropout": "model.dropout", "ctc_weight_train": "model.ctc_weight",
    "beam": "decode.beam", "ctc_weight": "decode.ctc_weight", "max_len_ratio": "decode.max_len_ratio",
    "flavor": "embedder.flavor", "embed_epochs": "embedder.epochs",
    "systems": "systems", "edges": "edges", "holdout": "holdout_per_speaker",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON file; flags override its keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set train.epochs=5")
    p.add_argument("--threads", type=int, help="cap on intra-op threads (torch and pools)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_adapt(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    if with_mode:
        p.add_argument("--adapt", choices=MODES, help="embedding injection mode")
    p.add_argument("--norm", choices=NORM_AXES, help="L2 normalisation axis of the embedding block")
    p.add_argument("--specaug-joint", type=_on_off, metavar="on|off",
                   help="apply SpecAugment to the joint feature+embedding matrix")
    p.add_argument("--specaug", type=_on_off, metavar="on|off", help="enable SpecAugment during training")
    p.add_argument("--norm-after-specaug", action="store_true",
                   help="normalise the embedding after SpecAugment instead of before")


def _add_model_train(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=("desk", "paper-nptel"))
    for name in ("d-model", "enc-layers", "dec-layers", "heads", "ffn-dim", "conv-channels"):
        g.add_argument(f"--{name}", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--ctc-weight-train", type=float, help="CTC weight in the training loss")
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--warmup", type=int, help="Noam warmup steps")
    g.add_argument("--lr-factor", type=float)
    g.add_argument("--batch-bins", type=int, help="max (utterances x frames) per batch")
    g.add_argument("--accum-grad", type=int)
    g.add_argument("--average-k", type=int, help="average the k best checkpoints by dev loss")
    g.add_argument("--grad-clip", type=float)
    g.add_argument("--dtype", choices=("float32", "float64"))


def _add_decode(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int)
    p.add_argument("--ctc-weight", type=float, help="CTC weight in the decoding score")
    p.add_argument("--max-len-ratio", type=float, help="max output tokens per encoder frame (0: encoder length)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spkadapt", description="Speaker-adaptive transformer ASR toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="synthetic corpus generation and duration buckets")
    csub = p.add_subparsers(dest="action", required=True)
    q = csub.add_parser("generate", help="render a CorpusSpec to audio + manifest")
    q.add_argument("--spec", help="CorpusSpec JSON (defaults if omitted)")
    q.add_argument("--out", required=True)
    q.add_argument("--workers", type=int, default=1)
    _add_common(q)
    q = csub.add_parser("bucket", help="split a manifest by duration")
    q.add_argument("--manifest", required=True)
    q.add_argument("--edges", type=_edges, default=[5.0, 15.0], help="comma-separated seconds, e.g. 5,15")
    q.add_argument("--out", help="directory for one manifest per bucket")
    _add_common(q)

    p = sub.add_parser("features", help="feature extraction and CMVN")
    fsub = p.add_subparsers(dest="action", required=True)
    q = fsub.add_parser("extract", help="83-dim fbank+pitch features per utterance")
    q.add_argument("--manifest", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--pitch", choices=("nccf", "zeros"))
    _add_common(q)
    q = fsub.add_parser("cmvn", help="accumulate global CMVN stats over a training manifest")
    q.add_argument("--train-manifest", required=True)
    q.add_argument("--feats", required=True)
    q.add_argument("--out", required=True)
    _add_common(q)

    p = sub.add_parser("embed", help="speaker embedder training and extraction")
    esub = p.add_subparsers(dest="action", required=True)
    q = esub.add_parser("train")
    q.add_argument("--manifest", required=True)
    q.add_argument("--feats", required=True)
    q.add_argument("--cmvn", help="CMVN stats; per-utterance CMVN if omitted")
    q.add_argument("--flavor", choices=("ff", "attn"))
    q.add_argument("--embed-epochs", type=int)
    q.add_argument("--out", required=True)
    _add_common(q)
    q = esub.add_parser("extract", help="utterance vectors for a manifest plus per-speaker means")
    q.add_argument("--embedder", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--speaker-manifest", help="utterances whose mean forms each speaker vector (default: --manifest)")
    q.add_argument("--feats", required=True)
    q.add_argument("--cmvn")
    q.add_argument("--store", required=True)
    _add_common(q)
    q = esub.add_parser("export", help="write stored vectors as text")
    q.add_argument("--store", required=True)
    q.add_argument("--scope", choices=("speaker", "utterance"), required=True)
    q.add_argument("--out", required=True)
    _add_common(q)

    p = sub.add_parser("train", help="train one recogniser")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--dev-manifest", required=True)
    p.add_argument("--feats", required=True)
    p.add_argument("--cmvn")
    p.add_argument("--store", help="embedding store (required unless --adapt none)")
    p.add_argument("--tokens", help="token inventory file (default: characters of the transcripts)")
    p.add_argument("--out", required=True, help="run directory")
    _add_common(p)
    _add_adapt(p)
    _add_model_train(p)

    p = sub.add_parser("decode", help="beam search over a manifest")
    p.add_argument("--model", required=True, help="training run directory or checkpoint file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--feats", required=True)
    p.add_argument("--cmvn")
    p.add_argument("--store")
    p.add_argument("--out", required=True, help="hypothesis file")
    _add_common(p)
    _add_decode(p)

    p = sub.add_parser("score", help="pooled error rates per duration bucket")
    p.add_argument("--manifest", required=True)
    p.add_argument("--hyp", action="append", required=True, metavar="SYSTEM=FILE",
                   help="hypothesis file per system (repeatable)")
    p.add_argument("--edges", type=_edges, default=[5.0, 15.0])
    p.add_argument("--unit", choices=("word", "char"), default="word")
    p.add_argument("--out", help="directory for report.txt / report.csv")
    _add_common(p)

    p = sub.add_parser("report", help="combine per-system score CSVs into one table")
    p.add_argument("--reports", required=True, help="directory with <system>.csv files")
    p.add_argument("--systems", type=_systems, required=True, help="comma-separated, e.g. baseline,s_cat")
    p.add_argument("--unit", choices=("word", "char"), default="word", help="unit the score files were computed in")
    p.add_argument("--out")
    _add_common(p)

    p = sub.add_parser("run", help="whole pipeline over a system matrix")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--systems", type=_systems)
    p.add_argument("--edges", type=_edges)
    p.add_argument("--holdout", type=int, help="held-out utterances per speaker")
    p.add_argument("--pitch", choices=("nccf", "zeros"))
    p.add_argument("--cmvn-mode", choices=("global", "utterance"))
    _add_common(p)
    _add_adapt(p, with_mode=False)
    _add_model_train(p)
    _add_decode(p)
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    flags = {}
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if key is None or v is None:
            continue
        flags[key] = v
    if getattr(args, "norm_after_specaug", False):
        flags["train.adapt.norm_before_specaug"] = False
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k] = v
    return config_mod.resolve(getattr(args, "config", None), flags)


def _load_feats(feat_dir, manifest, cmvn_path):
    raw = read_archive(feat_dir, [r.utt_id for r in manifest.records])
    if cmvn_path:
        return normalize_features(raw, CmvnStats.load(cmvn_path), "global")
    return normalize_features(raw, None, "utterance")


def _tokenizer(tokens_path, manifests) -> Tokenizer:
    if tokens_path:
        return Tokenizer.from_file(tokens_path)
    return Tokenizer.from_texts(r.transcript for m in manifests for r in m.records)


# ------------------------------------------------------------- commands

def cmd_corpus(args, cfg: RunConfig) -> int:
    if args.action == "generate":
        spec = CorpusSpec.from_json(Path(args.spec).read_text()) if args.spec else cfg.corpus
        m = generate_corpus(spec, args.out, workers=max(1, args.workers))
        print(f"wrote {len(m)} utterances from {len(m.speakers)} speakers to {args.out}")
        return EXIT_OK
    m = load_manifest(args.manifest)
    names = bucket_names(args.edges)
    buckets = split_by_duration(m, args.edges)
    for name, b in zip(names, buckets):
        print(f"{name}\t{len(b)}")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            save_manifest(b, Path(args.out) / f"{name}.tsv")
    return EXIT_OK


def cmd_features(args, cfg: RunConfig) -> int:
    if args.action == "extract":
        m = load_manifest(args.manifest)
        write_archive(args.out, extract_manifest(m, cfg.pitch))
        print(f"extracted features for {len(m)} utterances into {args.out}")
        return EXIT_OK
    m = load_manifest(args.train_manifest)
    feats = read_archive(args.feats, [r.utt_id for r in m.records])
    stats = cmvn_accumulate(*feats.values())
    stats.save(args.out)
    print(f"CMVN stats over {stats.frame_count} frames written to {args.out}")
    return EXIT_OK


def cmd_embed(args, cfg: RunConfig) -> int:
    if args.action == "train":
        m = load_manifest(args.manifest)
        feats = _load_feats(args.feats, m, args.cmvn)
        emb = train_embedder(feats, {r.utt_id: r.speaker_id for r in m.records}, cfg.embedder)
        emb.save(args.out)
        print(f"embedder ({cfg.embedder.flavor}) train accuracy {emb.train_accuracy:.3f}; saved {args.out}")
        return EXIT_OK
    if args.action == "extract":
        m = load_manifest(args.manifest)
        spk_m = load_manifest(args.speaker_manifest) if args.speaker_manifest else m
        known = m.by_id()
        full = m.subset(list(m.records) + [r for r in spk_m.records if r.utt_id not in known])
        feats = _load_feats(args.feats, full, args.cmvn)
        embs = embed_manifest(TrainedEmbedder.load(args.embedder), full, feats, spk_m)
        EmbeddingStore(args.store).put_many(embs)
        print(f"stored {len(embs)} embeddings in {args.store}")
        return EXIT_OK
    store = EmbeddingStore(args.store)
    with open(args.out, "w", encoding="utf-8") as fh:
        for ident in store.ids(args.scope):
            vec = store.get(ident, args.scope).vector
            fh.write(ident + " " + " ".join(repr(float(v)) for v in vec) + "\n")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    train_m = load_manifest(args.train_manifest)
    dev_m = load_manifest(args.dev_manifest)
    feats = _load_feats(args.feats, train_m.subset(list(train_m.records) + list(dev_m.records)), args.cmvn)
    tok = _tokenizer(args.tokens, [train_m, dev_m])
    adapt = cfg.train.adapt
    store = EmbeddingStore(args.store) if adapt.mode != "none" else None
    if adapt.mode != "none" and not args.store:
        raise ConfigError("--store is required when --adapt is add or cat")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    (out / "adapt.json").write_text(_json(adapt.to_dict()))
    tok.save(out / "tokens.txt")
    mcfg = ModelConfig.preset(cfg.model.preset, len(tok), adapt_mode=adapt.mode, **cfg.model.overrides())
    tcfg = cfg.train
    tcfg.seed = cfg.seed
    tr = build_examples(train_m, feats, tok, store, "speaker")
    dv = build_examples(dev_m, feats, tok, store, "utterance")
    res = train(tr, dv, mcfg, tcfg, out_dir=out, vocab=tok.tokens)
    print(f"trained {tcfg.epochs} epochs; averaged epochs {res.averaged_from}; model in {out / 'model.avg.pt'}")
    return EXIT_OK


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_decode(args, cfg: RunConfig) -> int:
    path = Path(args.model)
    ckpt = load_checkpoint(path / "model.avg.pt" if path.is_dir() else path)
    model = model_from_checkpoint(ckpt)
    tok = Tokenizer(ckpt["vocab"], "bpe" if any("▁" in t for t in ckpt["vocab"]) else "char")
    adapt = AdaptConfig(**ckpt["train_config"]["adapt"])
    m = load_manifest(args.manifest)
    feats = _load_feats(args.feats, m, args.cmvn)
    store = EmbeddingStore(args.store) if adapt.mode != "none" else None
    if adapt.mode != "none" and not args.store:
        raise ConfigError(f"model uses --adapt {adapt.mode}; --store is required")
    d = cfg.decode
    hyps = decode_manifest(model, m, feats, tok, adapt, store, d.beam, d.ctc_weight, d.max_len_ratio)
    write_hypotheses(args.out, hyps)
    print(f"decoded {len(hyps)} utterances into {args.out}")
    return EXIT_OK


def cmd_score(args, cfg: RunConfig) -> int:
    m = load_manifest(args.manifest)
    results = {}
    for item in args.hyp:
        if "=" not in item:
            raise ConfigError(f"--hyp expects SYSTEM=FILE, got {item!r}")
        name, path = item.split("=", 1)
        results[name] = {u: text for u, (_, text) in read_hypotheses(path).items()}
    refs = {r.utt_id: r.transcript for r in m.records}
    report = bucket_report(results, refs, m, args.edges, unit=args.unit)
    sys.stdout.write(report.to_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        for name in report.systems:
            single = ScoreReport([name], report.buckets, report.edges,
                                 {k: v for k, v in report.counts.items() if k[0] == name}, report.unit)
            (out / f"{name}.csv").write_text(single.to_csv(), encoding="utf-8")
    return EXIT_OK


def load_report_csv(path: str | Path) -> ScoreReport:
    """Rebuild a ScoreReport from the CSV written by ``score``."""
    rows = list(csv.DictReader(Path(path).read_text(encoding="utf-8").splitlines()))
    if not rows:
        raise ScoringError(f"{path}: empty report")
    systems, cols = [], []
    counts = {}
    for r in rows:
        if r["system"] not in systems:
            systems.append(r["system"])
        if r["bucket"] not in cols:
            cols.append(r["bucket"])
        counts[(r["system"], r["bucket"])] = Counts(int(r["S"]), int(r["D"]), int(r["I"]), int(r["Nref"]))
    buckets = [c for c in cols if c != "overall"]
    return ScoreReport(systems, buckets, (), counts)


def cmd_report(args, cfg: RunConfig) -> int:
    merged = None
    for name in args.systems:
        path = Path(args.reports) / f"{name}.csv"
        if not path.exists():
            raise ScoringError(f"no score file for system {name!r} at {path}")
        rep = load_report_csv(path)
        if merged is None:
            merged = ScoreReport([], rep.buckets, tuple(cfg.edges), {}, args.unit)
        merged.systems.append(name)
        merged.counts.update({(name, b): c for (s, b), c in rep.counts.items() if s == name})
    text = merged.to_table()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_run(args, cfg: RunConfig) -> int:
    report = run_experiment(cfg, args.run_dir)
    sys.stdout.write(report.to_table())
    return EXIT_OK


COMMANDS = {"corpus": cmd_corpus, "features": cmd_features, "embed": cmd_embed, "train": cmd_train,
            "decode": cmd_decode, "score": cmd_score, "report": cmd_report, "run": cmd_run}

DATA_ERRORS = (CorpusError, FrontendError, ScoringError, DecodeError, EmbeddingNotFound, ScopeError,
               FileNotFoundError, OSError)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    if isinstance(exc, ValueError):
        return EXIT_USAGE
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(max(1, cfg.threads))
        return COMMANDS[args.command](args, cfg)
    except Exception as e:  # noqa: BLE001 - top-level diagnostic
        code = _exit_code(e)
        if code == 1:
            raise
        print(f"spkadapt {args.command}: error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
