"""Joint attention/CTC beam search and an independent greedy decoder.

Scores are combined per hypothesis as

    (1 - w) * sum of decoder log-probs + w * CTC prefix log-prob

where the CTC term of a finished hypothesis (ending in eos) is the full
sequence probability rather than the prefix probability. Both terms can only
decrease as a hypothesis grows, which makes the early stop below exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .ctc import ctc_alpha, ctc_prefix_log_prob

NEG_INF = -math.inf


class DecodeError(ValueError):
    pass


@dataclass
class Hypothesis:
    utt_id: str
    ids: list[int]
    text: str
    score: float
    duration_s: float = 0.0
    att_score: float = 0.0
    ctc_score: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DecodeError(f"{self.utt_id}: non-finite hypothesis score")


class CTCPrefixScorer:
    """Incremental CTC prefix probabilities over a fixed T x V log-prob matrix.

    A state is (r, log_psi, last) where ``r[t]`` holds the log-probabilities
    of the prefix having been emitted by frame t ending in a non-blank
    (column 0) or blank (column 1).
    """

    def __init__(self, log_probs: np.ndarray, blank: int, eos: int):
        self.lp = np.asarray(log_probs, dtype=np.float64)
        self.blank = blank
        self.eos = eos

    def initial_state(self):
        r = np.full((self.lp.shape[0], 2), NEG_INF)
        r[:, 1] = np.cumsum(self.lp[:, self.blank])
        return r, 0.0, None

    def score(self, state, candidates: np.ndarray):
        """Prefix log-probs of prefix+c for each candidate, and the new r arrays (T x 2 x C)."""
        r_prev, _, last = state
        lp = self.lp
        t_len = lp.shape[0]
        cand = np.asarray(candidates, dtype=np.int64)
        x = lp[:, cand]
        r_sum = np.logaddexp(r_prev[:, 0], r_prev[:, 1])
        phi = np.repeat(r_sum[:, None], len(cand), axis=1)
        if last is not None:
            same = cand == last
            phi[:, same] = r_prev[:, 1:2]
        r = np.full((t_len, 2, len(cand)), NEG_INF)
        if last is None:
            r[0, 0] = x[0]
        psi = r[0, 0].copy()
        for t in range(1, t_len):
            r[t, 0] = np.logaddexp(r[t - 1, 0], phi[t - 1]) + x[t]
            r[t, 1] = np.logaddexp(r[t - 1, 0], r[t - 1, 1]) + lp[t, self.blank]
            psi = np.logaddexp(psi, phi[t - 1] + x[t])
        psi[cand == self.eos] = r_sum[-1]
        return psi, r


@dataclass(order=True)
class _Beam:
    sort_key: tuple = field(compare=True)
    ys: list = field(compare=False)
    score: float = field(compare=False)
    att: float = field(compare=False)
    ctc: float = field(compare=False)
    ctc_state: tuple = field(compare=False)


def _encode(model, x: torch.Tensor):
    if x.dim() != 2 or x.size(0) == 0:
        raise DecodeError("empty input")
    model.eval()
    lengths = torch.tensor([x.size(0)])
    with torch.no_grad():
        h, _, mask = model.encode(x[None], lengths)
        lp = model.ctc_log_probs(h)[0].double().numpy()
    return h, mask, lp


def _max_len(n_enc: int, ctc_weight: float, max_len_ratio: float) -> int:
    if max_len_ratio > 0:
        return max(1, int(max_len_ratio * n_enc))
    return n_enc


def _att_log_probs(model, memory, mask, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    ys = torch.tensor([list(p) for p in prefixes], dtype=torch.long)
    n = ys.size(0)
    with torch.no_grad():
        logits = model.decode_forward(memory.expand(n, -1, -1), mask.expand(n, -1, -1), ys)
        return torch.log_softmax(logits[:, -1], dim=-1).double().numpy()


def beam_search(model, adapted_input: torch.Tensor, beam: int = 4, ctc_weight: float = 0.3,
                max_len_ratio: float = 0.0, nbest: int = 1, blank: int = 0):
    """Decode one utterance (T x input_dim model input); returns the n-best list.

    Each step expands every running hypothesis by every non-blank token and
    keeps the ``beam`` best candidates overall; candidates ending in eos
    leave the beam as finished hypotheses. With ``beam=1`` this is greedy
    search. The output length is capped at ``max_len_ratio`` times the
    encoder length (the encoder length itself when the ratio is 0); any
    hypothesis still running at the cap is closed with eos.

    Returns a list of (token ids, score, attention score, CTC score).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if not 0.0 <= ctc_weight <= 1.0:
        raise ValueError("ctc_weight must be in [0, 1]")
    memory, mask, lp = _encode(model, adapted_input)
    sos = eos = model.sos
    vocab = lp.shape[1]
    cands = np.array([c for c in range(vocab) if c != blank], dtype=np.int64)
    scorer = CTCPrefixScorer(lp, blank, eos)
    w = ctc_weight
    max_len = _max_len(lp.shape[0], w, max_len_ratio)
    running = [_Beam((0.0,), [sos], 0.0, 0.0, 0.0, scorer.initial_state())]
    ended: list[_Beam] = []
    for step in range(max_len + 1):
        if not running:
            break
        att = _att_log_probs(model, memory, mask, [b.ys for b in running])
        pool = []
        for bi, b in enumerate(running):
            att_new = b.att + att[bi, cands]
            if w > 0:
                psi, r = scorer.score(b.ctc_state, cands)
            else:
                psi, r = np.zeros(len(cands)), None
            total = (1.0 - w) * att_new + w * psi
            if step == max_len:
                allowed = cands == eos
            else:
                allowed = np.isfinite(total)
            for ci in np.flatnonzero(allowed):
                pool.append((-total[ci], bi, int(cands[ci]), float(total[ci]), float(att_new[ci]),
                             float(psi[ci]), ci, r))
        pool.sort(key=lambda p: (p[0], p[1], p[2]))
        nxt = []
        for _, bi, c, total, a, psi, ci, r in pool[:beam]:
            parent = running[bi]
            ys = parent.ys + [c]
            if c == eos:
                ended.append(_Beam((-total, len(ended)), ys, total, a, psi, None))
            else:
                state = (r[:, :, ci], psi, c) if r is not None else None
                nxt.append(_Beam((-total,), ys, total, a, psi, state))
        running = nxt
        best_end = max((e.score for e in ended), default=NEG_INF)
        if running and best_end >= max(b.score for b in running):
            break
    if not ended:
        raise DecodeError("no hypothesis reached eos")
    ended.sort(key=lambda e: (-e.score, len(e.ys)))
    return [(e.ys[1:-1], e.score, e.att, e.ctc) for e in ended[:nbest]]


def greedy_decode(model, adapted_input: torch.Tensor, ctc_weight: float = 0.3,
                  max_len_ratio: float = 0.0, blank: int = 0):
    """Token-by-token argmax of the combined score, recomputing everything from scratch.

    CTC terms come from full forward passes over the whole prefix, not from
    the incremental scorer. Returns (token ids, score).
    """
    memory, mask, lp = _encode(model, adapted_input)
    sos = eos = model.sos
    w = ctc_weight
    max_len = _max_len(lp.shape[0], w, max_len_ratio)
    ys: list[int] = []
    att_total = 0.0
    while True:
        att = _att_log_probs(model, memory, mask, [[sos] + ys])[0]
        best, best_c, best_att = NEG_INF, None, 0.0
        tokens = [eos] if len(ys) == max_len else range(lp.shape[1])
        for c in tokens:
            if c == blank:
                continue
            if w > 0:
                ctc = ctc_alpha(lp, ys, blank)[1] if c == eos else ctc_prefix_log_prob(lp, ys + [c], blank)
            else:
                ctc = 0.0
            total = (1.0 - w) * (att_total + att[c]) + w * ctc
            if total > best:
                best, best_c, best_att = total, c, att_total + att[c]
        if best_c is None:
            raise DecodeError("no finite continuation")
        att_total = best_att
        if best_c == eos:
            return ys, best
        ys.append(best_c)


def write_hypotheses(path: str | Path, hyps: Iterable[Hypothesis]) -> None:
    lines = [f"{h.utt_id}\t{h.score:.6f}\t{h.text}\n" for h in hyps]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_hypotheses(path: str | Path) -> dict[str, tuple[float, str]]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DecodeError(f"{path}:{n}: expected 3 tab-separated fields")
        out[parts[0]] = (float(parts[1]), parts[2])
    return out
