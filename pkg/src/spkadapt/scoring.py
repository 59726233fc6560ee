"""Edit-distance error rates and duration-bucketed reports.

Error rates are pooled: each bucket's rate is 100 * (S + D + I) / N over
the summed counts of its utterances, not an average of per-utterance rates.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .corpus import DEFAULT_EDGES, Manifest, bucket_index, bucket_names, parse_edges


class ScoringError(ValueError):
    pass


def align_counts(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a minimum-edit alignment.

    Among alignments of minimal total cost, ties are broken toward
    substitutions, then deletions, then insertions, so counts are
    deterministic.
    """
    n, m = len(ref), len(hyp)
    # each cell: (cost, S, D, I)
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            c, s, d, ins = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, s, d, ins)
            else:
                diag = (c + 1, s + 1, d, ins)
            c, s, d, ins = prev[j]
            up = (c + 1, s, d + 1, ins)
            c, s, d, ins = cur[j - 1]
            left = (c + 1, s, d, ins + 1)
            cur.append(min((diag, 0), (up, 1), (left, 2), key=lambda p: (p[0][0], p[1]))[0])
        prev = cur
    _, s, d, ins = prev[m]
    return s, d, ins


def wer(ref: Sequence, hyp: Sequence) -> tuple[float, int, int, int]:
    """Error rate in percent plus (S, D, I); may exceed 100."""
    if len(ref) == 0:
        raise ScoringError("reference is empty")
    s, d, i = align_counts(ref, hyp)
    return 100.0 * (s + d + i) / len(ref), s, d, i


def units(text: str, unit: str) -> list[str]:
    """Split text into scoring units: whitespace words or characters (spaces dropped)."""
    if unit == "word":
        return text.split()
    if unit == "char":
        return [c for c in text if not c.isspace()]
    raise ValueError(f"unit must be word or char, got {unit!r}")


def metric_name(unit: str) -> str:
    return "CER" if unit == "char" else "WER"


@dataclass
class Counts:
    s: int = 0
    d: int = 0
    i: int = 0
    n: int = 0

    def add(self, s: int, d: int, i: int, n: int) -> None:
        self.s += s
        self.d += d
        self.i += i
        self.n += n

    @property
    def rate(self) -> float:
        return 100.0 * (self.s + self.d + self.i) / self.n if self.n else float("nan")


@dataclass
class ScoreReport:
    systems: list[str]
    buckets: list[str]
    edges: tuple[float, ...]
    counts: dict[tuple[str, str], Counts] = field(default_factory=dict)
    unit: str = "word"

    def rate(self, system: str, bucket: str = "overall") -> float:
        return self.counts[(system, bucket)].rate

    def columns(self) -> list[str]:
        return ["overall", *self.buckets]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["system", "bucket", "wer", "S", "D", "I", "Nref"])
        for sys_name in self.systems:
            for b in self.columns():
                c = self.counts[(sys_name, b)]
                w.writerow([sys_name, b, _fmt(c.rate), c.s, c.d, c.i, c.n])
        return buf.getvalue()

    def to_table(self) -> str:
        metric = metric_name(self.unit)
        edges = ",".join(f"{e:g}" for e in self.edges)
        header = [f"# pooled {metric} (%) = 100*(S+D+I)/Nref over all utterances in a cell; "
                  f"bucket edges {edges} s, left-closed"]
        cols = self.columns()
        width0 = max(len("system"), *(len(s) for s in self.systems))
        widths = [max(len(c), 7) for c in cols]
        rows = ["system".ljust(width0) + "".join("  " + c.rjust(w) for c, w in zip(cols, widths))]
        for sys_name in self.systems:
            cells = [_fmt(self.rate(sys_name, c)).rjust(w) for c, w in zip(cols, widths)]
            rows.append(sys_name.ljust(width0) + "".join("  " + c for c in cells))
        sizes = [str(self.counts[(self.systems[0], c)].n).rjust(w) for c, w in zip(cols, widths)] \
            if self.systems else []
        rows.append("Nref".ljust(width0) + "".join("  " + s for s in sizes))
        return "\n".join(header + rows) + "\n"


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.2f}"


def bucket_report(results: Mapping[str, Mapping[str, str]], references: Mapping[str, str],
                  manifest: Manifest, edges: Sequence[float] = DEFAULT_EDGES,
                  unit: str = "word") -> ScoreReport:
    """Pooled error rates per system, overall and per duration bucket.

    ``results`` maps system name -> {utt_id: hypothesis text};
    ``references`` maps utt_id -> reference text. Every utterance in the
    manifest must have a hypothesis from every system.
    """
    edges = parse_edges(edges)
    names = bucket_names(edges)
    report = ScoreReport(list(results), names, tuple(edges), unit=unit)
    for sys_name, hyps in results.items():
        missing = [r.utt_id for r in manifest.records if r.utt_id not in hyps]
        if missing:
            raise ScoringError(f"system {sys_name!r} has no hypothesis for {len(missing)} "
                               f"utterance(s), e.g. {missing[0]}")
        for col in report.columns():
            report.counts[(sys_name, col)] = Counts()
        for rec in manifest.records:
            ref = units(references[rec.utt_id], unit)
            s, d, i = align_counts(ref, units(hyps[rec.utt_id], unit))
            report.counts[(sys_name, "overall")].add(s, d, i, len(ref))
            report.counts[(sys_name, names[bucket_index(rec.duration_s, edges)])].add(s, d, i, len(ref))
    return report
