"""Training loop: Noam-scheduled Adam, frame-binned batches, gradient
accumulation, per-epoch checkpoints and best-k checkpoint averaging.

The objective of one optimizer step is the sum of per-utterance hybrid
losses divided by the number of utterances in the step. Micro-batches under
``accum_grad`` are scaled by the same denominator, so accumulating k
micro-batches gives the same update as one batch holding all of them.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .adapt import AdaptConfig, check_scope, prepare_batch
from .model import ASRModel, ModelConfig
from .specaug import SpecAugPolicy
from .speaker_embed import SpeakerEmbedding
from .utils import rng_stream, stable_hash

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "spkadapt-checkpoint/1"
BEST_METRIC = "dev hybrid loss (lower is better)"


class NumericError(RuntimeError):
    """A loss or gradient became NaN/Inf."""


def noam_lr(step: int, d_model: int, warmup: int, factor: float) -> float:
    if step < 1:
        raise ValueError("Noam schedule is defined for step >= 1")
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_steps: int = 800
    lr_factor: float = 1.0
    batch_bins: int = 6000
    max_batch_utts: int = 32
    accum_grad: int = 1
    seed: int = 0
    average_k: int = 3
    grad_clip: float = 5.0
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    dtype: str = "float32"
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    specaug: SpecAugPolicy = field(default_factory=SpecAugPolicy)

    def __post_init__(self):
        if isinstance(self.adapt, Mapping):
            self.adapt = AdaptConfig(**self.adapt)
        if isinstance(self.specaug, Mapping):
            self.specaug = SpecAugPolicy(**self.specaug)
        self.adam_betas = tuple(self.adam_betas)
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.average_k < 1:
            raise ValueError("average_k must be >= 1")
        if self.accum_grad < 1 or self.epochs < 1:
            raise ValueError("accum_grad and epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Example:
    """One training/dev utterance: CMVN'd features, target ids, optional embedding."""

    utt_id: str
    feats: np.ndarray
    target: list[int]
    embedding: SpeakerEmbedding | None = None


def make_batches(examples: Sequence[Example], batch_bins: int, max_utts: int) -> list[list[int]]:
    """Group example indices so that (utterances x longest length) stays within ``batch_bins``.

    Examples are sorted by length (longest first, ties by utt_id) before
    greedy filling, so batches hold similar lengths. A single example longer
    than the bin still forms its own batch.
    """
    order = sorted(range(len(examples)), key=lambda i: (-len(examples[i].feats), examples[i].utt_id))
    batches, cur, cur_max = [], [], 0
    for i in order:
        n = len(examples[i].feats)
        new_max = max(cur_max, n)
        if cur and (new_max * (len(cur) + 1) > batch_bins or len(cur) >= max_utts):
            batches.append(cur)
            cur, new_max = [], n
        cur.append(i)
        cur_max = new_max
    if cur:
        batches.append(cur)
    return batches


def collate(examples: Sequence[Example], cfg: TrainConfig, training: bool, epoch: int = 0,
            dtype: torch.dtype = torch.float32):
    """Run the data-side adaptation steps and pad into tensors.

    SpecAugment draws come from a stream keyed by (seed, epoch, utt_id), so
    an utterance is augmented identically whatever batch it lands in.
    """
    adapt = cfg.adapt
    if adapt.mode != "none" and training:
        for ex in examples:
            if ex.embedding is None:
                raise ValueError(f"{ex.utt_id}: adaptation needs an embedding")
            check_scope(ex.embedding.scope, training=True)
    embs = None if adapt.mode == "none" else [ex.embedding.vector for ex in examples]
    rngs = [rng_stream(cfg.seed, "specaug", epoch, ex.utt_id) for ex in examples]
    feats, emb_frames = prepare_batch([ex.feats for ex in examples], embs, adapt,
                                      cfg.specaug, rngs, training)
    lengths = torch.tensor([len(f) for f in feats])
    t_max = int(lengths.max())
    x = torch.zeros(len(feats), t_max, feats[0].shape[1], dtype=dtype)
    for i, f in enumerate(feats):
        x[i, :len(f)] = torch.as_tensor(f, dtype=dtype)
    e = None
    if emb_frames is not None:
        e = torch.zeros(len(feats), t_max, emb_frames[0].shape[1], dtype=dtype)
        for i, f in enumerate(emb_frames):
            e[i, :len(f)] = torch.as_tensor(f, dtype=dtype)
    return x, e, lengths, [ex.target for ex in examples]


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=0.0, betas=cfg.adam_betas, eps=cfg.adam_eps)


def train_step(model: ASRModel, optimizer: torch.optim.Optimizer, micro_batches: Sequence[Sequence[Example]],
               cfg: TrainConfig, step: int, epoch: int = 0, batch_label: str = "") -> float:
    """One optimizer update over ``micro_batches`` (accumulated); returns the summed utterance loss."""
    n_total = sum(len(mb) for mb in micro_batches)
    dtype = next(model.parameters()).dtype
    optimizer.zero_grad()
    total = 0.0
    for mb in micro_batches:
        x, e, lengths, targets = collate(mb, cfg, training=True, epoch=epoch, dtype=dtype)
        out = model(x, e, lengths, targets)
        loss_sum = out["loss"].sum()
        if not torch.isfinite(loss_sum):
            ids = ",".join(ex.utt_id for ex in mb)
            raise NumericError(f"non-finite training loss in epoch {epoch} batch {batch_label} ({ids})")
        (loss_sum / n_total).backward()
        total += float(loss_sum)
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    lr = noam_lr(step, model.cfg.d_model, cfg.warmup_steps, cfg.lr_factor)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return total


def evaluate_loss(model: ASRModel, examples: Sequence[Example], cfg: TrainConfig) -> float:
    """Mean per-utterance hybrid loss, no augmentation or dropout."""
    if not examples:
        return float("nan")
    model.eval()
    dtype = next(model.parameters()).dtype
    total = 0.0
    with torch.no_grad():
        for idx in make_batches(examples, cfg.batch_bins, cfg.max_batch_utts):
            x, e, lengths, targets = collate([examples[i] for i in idx], cfg, training=False, dtype=dtype)
            total += float(model(x, e, lengths, targets)["loss"].sum())
    return total / len(examples)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    lr: float
    wall_s: float


@dataclass
class TrainResult:
    model: ASRModel
    history: list[EpochRecord]
    checkpoints: list[dict]
    averaged_from: list[int]


def save_checkpoint(path: str | Path, model: ASRModel, train_cfg: TrainConfig | None, vocab: Sequence[str] | None,
                    epoch: int = 0, dev_loss: float = float("nan")) -> dict:
    blob = {"format": CHECKPOINT_FORMAT, "epoch": epoch, "dev_loss": dev_loss,
            "model_config": model.cfg.to_dict(),
            "train_config": train_cfg.to_dict() if train_cfg is not None else None,
            "vocab": list(vocab) if vocab is not None else None,
            "params": {k: v.detach().clone() for k, v in model.state_dict().items()}}
    if path is not None:
        torch.save(blob, path)
    return blob


def load_checkpoint(path: str | Path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    return blob


def model_from_checkpoint(blob: Mapping) -> ASRModel:
    model = ASRModel(ModelConfig(**blob["model_config"]))
    params = blob["params"]
    model.to(next(iter(params.values())).dtype)
    model.load_state_dict(params)
    model.eval()
    return model


def average_checkpoints(checkpoints: Sequence[Mapping[str, torch.Tensor]], dev_metric: Sequence[float],
                        k: int = 3) -> tuple[dict[str, torch.Tensor], list[int]]:
    """Key-wise mean of the ``k`` checkpoints with the lowest dev metric.

    Ties go to the earlier checkpoint. Returns the averaged parameters and
    the selected indices (in selection order).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(checkpoints) != len(dev_metric):
        raise ValueError("need one dev metric per checkpoint")
    if len(checkpoints) < k:
        raise ValueError(f"need at least {k} checkpoints to average, got {len(checkpoints)}")
    metric = [float(m) for m in dev_metric]
    if any(math.isnan(m) for m in metric):
        raise ValueError("dev metric contains NaN")
    chosen = sorted(range(len(metric)), key=lambda i: (metric[i], i))[:k]
    keys = set(checkpoints[chosen[0]])
    for i in chosen[1:]:
        if set(checkpoints[i]) != keys:
            raise ValueError("checkpoints have different parameter names")
    avg = {}
    for key in checkpoints[chosen[0]]:
        tensors = [checkpoints[i][key] for i in chosen]
        if tensors[0].is_floating_point():
            acc = torch.zeros_like(tensors[0], dtype=torch.float64)
            for t in tensors:
                acc += t.double()
            avg[key] = (acc / k).to(tensors[0].dtype)
        else:
            avg[key] = tensors[0].clone()
    return avg, chosen


def build_model(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ASRModel:
    if model_cfg.adapt_mode != train_cfg.adapt.mode:
        raise ValueError(f"model adapt mode {model_cfg.adapt_mode!r} differs from "
                         f"training adapt mode {train_cfg.adapt.mode!r}")
    torch.manual_seed(train_cfg.seed)
    return ASRModel(model_cfg).to(train_cfg.torch_dtype)


def train(train_set: Sequence[Example], dev_set: Sequence[Example], model_cfg: ModelConfig,
          train_cfg: TrainConfig, out_dir: str | Path | None = None,
          vocab: Sequence[str] | None = None) -> TrainResult:
    """Train from scratch; returns the best-k averaged model and the epoch history.

    With ``out_dir`` set, writes ``train_log.csv`` and one checkpoint per
    epoch under ``checkpoints/``.
    """
    if not train_set:
        raise ValueError("empty training set")
    if train_cfg.epochs < train_cfg.average_k:
        raise ValueError(f"epochs ({train_cfg.epochs}) < average_k ({train_cfg.average_k})")
    vocab_size = model_cfg.vocab_size
    for ex in list(train_set) + list(dev_set):
        if any(not 0 < t < vocab_size - 1 for t in ex.target):
            raise ValueError(f"{ex.utt_id}: target ids outside the model vocabulary")
    if train_cfg.adapt.mode != "none":
        for ex in train_set:
            if ex.embedding is None:
                raise ValueError(f"{ex.utt_id}: adaptation needs an embedding")
            check_scope(ex.embedding.scope, training=True)
    model = build_model(model_cfg, train_cfg)
    optimizer = make_optimizer(model, train_cfg)
    batches = make_batches(train_set, train_cfg.batch_bins, train_cfg.max_batch_utts)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.csv", "w", newline="", encoding="utf-8")
        log_fh.write(f"# best-checkpoint metric: {BEST_METRIC}; average_k={train_cfg.average_k}\n")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "dev_loss", "lr", "wall_s"])
    history, checkpoints = [], []
    step = 0
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            torch.manual_seed(stable_hash(f"{train_cfg.seed}/dropout/{epoch}"))
            order = rng_stream(train_cfg.seed, "batches", epoch).permutation(len(batches))
            model.train()
            total = 0.0
            for g in range(0, len(order), train_cfg.accum_grad):
                group = [[train_set[i] for i in batches[b]] for b in order[g:g + train_cfg.accum_grad]]
                step += 1
                total += train_step(model, optimizer, group, train_cfg, step, epoch,
                                    batch_label=",".join(str(int(b)) for b in order[g:g + train_cfg.accum_grad]))
            train_loss = total / len(train_set)
            dev_loss = evaluate_loss(model, dev_set, train_cfg) if dev_set else train_loss
            lr = noam_lr(step, model_cfg.d_model, train_cfg.warmup_steps, train_cfg.lr_factor)
            rec = EpochRecord(epoch, train_loss, dev_loss, lr, time.perf_counter() - t0)
            history.append(rec)
            path = out / "checkpoints" / f"epoch{epoch:03d}.pt" if out is not None else None
            checkpoints.append(save_checkpoint(path, model, train_cfg, vocab, epoch, dev_loss))
            if writer is not None:
                writer.writerow([epoch, f"{train_loss:.6f}", f"{dev_loss:.6f}", f"{lr:.6e}", f"{rec.wall_s:.3f}"])
                log_fh.flush()
            log.info("epoch %d train %.4f dev %.4f lr %.2e (%.1fs)", epoch, train_loss, dev_loss, lr, rec.wall_s)
    finally:
        if writer is not None:
            log_fh.close()
    avg, chosen = average_checkpoints([c["params"] for c in checkpoints], [c["dev_loss"] for c in checkpoints],
                                      train_cfg.average_k)
    model.load_state_dict(avg)
    model.eval()
    if out is not None:
        save_checkpoint(out / "model.avg.pt", model, train_cfg, vocab,
                        epoch=train_cfg.epochs, dev_loss=float("nan"))
    return TrainResult(model, history, checkpoints, [checkpoints[i]["epoch"] for i in chosen])
