"""Accuracy@N, trajectory BLEU and the evaluation report."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import EOT
from .decode import BeamConfig, SuccessorTable, beam_search_batch
from .hexgrid import GridSpec, cell_centroid


@dataclass
class EvalCase:
    prefix: tuple
    truth: tuple  # EOT-truncated
    predictions: list = field(default_factory=list)  # EOT-truncated, best first


@dataclass(frozen=True)
class BleuParams:
    max_order: int = 4
    clip: bool = True

    @property
    def weights(self) -> list[float]:
        return [1.0 / self.max_order] * self.max_order


def truncate_eot(tokens: Sequence[int]) -> tuple:
    tokens = tuple(int(t) for t in tokens)
    return tokens[: tokens.index(EOT)] if EOT in tokens else tokens


def accuracy_at_n(cases: Sequence[EvalCase], n: int) -> float:
    """Fraction of cases whose truth equals one of the top ``n`` predictions."""
    if not cases:
        raise ValueError("no evaluation cases")
    hits = sum(1 for c in cases if any(tuple(p) == tuple(c.truth) for p in c.predictions[:n]))
    return hits / len(cases)


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def modified_precisions(candidates, references, params: BleuParams = BleuParams()) -> list[tuple[int, int]]:
    """``(clipped matches, candidate n-grams)`` for n = 1..max_order, summed over the corpus."""
    out = []
    for n in range(1, params.max_order + 1):
        matched = total = 0
        for cand, ref in zip(candidates, references):
            cc, rc = _ngrams(cand, n), _ngrams(ref, n)
            total += sum(cc.values())
            if params.clip:
                matched += sum(min(v, rc[g]) for g, v in cc.items())
            else:
                matched += sum(v for g, v in cc.items() if g in rc)
        out.append((matched, total))
    return out


def brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def bleu_score(candidates, references, params: BleuParams = BleuParams()) -> float:
    if not candidates:
        raise ValueError("no candidates")
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    log_sum = 0.0
    for w, (m, t) in zip(params.weights, modified_precisions(candidates, references, params)):
        if m == 0 or t == 0:
            return 0.0
        log_sum += w * math.log(m / t)
    c = sum(len(x) for x in candidates)
    r = sum(len(x) for x in references)
    return brevity_penalty(c, r) * math.exp(log_sum)


def bleu(cases: Sequence[EvalCase], params: BleuParams = BleuParams()) -> float:
    """Corpus BLEU of each case's top-1 prediction against its truth."""
    if not cases:
        raise ValueError("no evaluation cases")
    cands = [tuple(c.predictions[0]) if c.predictions else () for c in cases]
    return bleu_score(cands, [tuple(c.truth) for c in cases], params)


def first_order_cap(cases: Sequence[EvalCase]) -> float:
    """Best Acc@1 any predictor that sees only the last prefix token can reach on ``cases``.

    Such a predictor emits one continuation per last token, so at best the
    most frequent truth among the cases sharing that token.
    """
    if not cases:
        raise ValueError("no evaluation cases")
    groups: dict[int, Counter] = {}
    for c in cases:
        groups.setdefault(c.prefix[-1], Counter())[tuple(c.truth)] += 1
    return sum(max(g.values()) for g in groups.values()) / len(cases)


def build_cases(sequences: Sequence[Sequence[int]], l: int, k: int) -> list[EvalCase]:
    """One case per stride-1 window of ``l + k`` tokens: ``l`` prefix tokens and the next ``k``."""
    cases = []
    for seq in sequences:
        seq = tuple(int(t) for t in seq)
        for s in range(len(seq) - (l + k) + 1):
            prefix = seq[s:s + l]
            if EOT in prefix:
                continue
            cases.append(EvalCase(prefix, truncate_eot(seq[s + l:s + l + k])))
    return cases


def predict_cases(model, cases: Sequence[EvalCase], table: SuccessorTable, k: int, width: int,
                  renormalize: bool = True, chunk: int = 512) -> list[EvalCase]:
    """Fill each case's predictions from a beam search of horizon ``k``; returns new cases."""
    cfg = BeamConfig(width=width, horizon=k, renormalize=renormalize)
    out = []
    for i in range(0, len(cases), chunk):
        batch = cases[i:i + chunk]
        results = beam_search_batch(model, [c.prefix for c in batch], cfg, table)
        for c, hyps in zip(batch, results):
            out.append(EvalCase(c.prefix, c.truth, [truncate_eot(h.generated) for h in hyps]))
    return out


def travel_distance(case: EvalCase, cells: Sequence, spec: GridSpec) -> float:
    """Summed centroid-to-centroid distance from the last prefix cell along the truth."""
    pts = [cell_centroid(cells[t], spec) for t in (case.prefix[-1],) + tuple(case.truth)]
    return float(sum(math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(pts[:-1], pts[1:])))


@dataclass
class EvalReport:
    n_cases: int
    accuracy: dict
    bleu: float
    horizon_accuracy: dict
    distance_bins: list  # (lo_m, hi_m, n_cases, acc1)

    def rows(self) -> list[tuple[str, float]]:
        rows = [("cases", float(self.n_cases))]
        rows += [(f"acc@{n}", v) for n, v in sorted(self.accuracy.items())]
        rows.append(("bleu", self.bleu))
        rows += [(f"acc@1_k{kk}", v) for kk, v in sorted(self.horizon_accuracy.items())]
        for lo, hi, n, acc in self.distance_bins:
            rows.append((f"acc@1_dist_{int(lo)}_{int(hi)}m_n{n}", acc))
        return rows

    def to_text(self) -> str:
        rows = self.rows()
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value:10.6f}" for name, value in rows) + "\n"

    def to_csv(self, config_hash: str, seed: int) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "config_hash", "seed"])
        for name, value in self.rows():
            w.writerow([name, f"{value:.6f}", config_hash, seed])
        return buf.getvalue()


def evaluate(model, sequences: Sequence[Sequence[int]], table: SuccessorTable, l: int = 10, k: int = 5,
             width: int = 5, spec: GridSpec | None = None, distance_bin_m: float = 1000.0,
             renormalize: bool = True, horizons: bool = True) -> EvalReport:
    """Full metric report over the test sequences (token ids including EOT)."""
    base = build_cases(sequences, l, k)
    if not base:
        raise ValueError(f"no test window of length {l + k}")
    cases = predict_cases(model, base, table, k, width, renormalize)
    accuracy = {n: accuracy_at_n(cases, n) for n in (1, 3, 5)}
    horizon_acc = {}
    if horizons:
        for kk in range(1, k + 1):
            if kk == k:
                horizon_acc[kk] = accuracy[1]
                continue
            sub = [EvalCase(c.prefix, tuple(c.truth[:kk])) for c in base]
            horizon_acc[kk] = accuracy_at_n(predict_cases(model, sub, table, kk, width, renormalize), 1)
    bins = []
    if spec is not None:
        cells = table.vocab.cells
        dists = np.array([travel_distance(c, cells, spec) for c in cases])
        hits = np.array([bool(c.predictions) and tuple(c.predictions[0]) == tuple(c.truth) for c in cases])
        idx = np.floor(dists / distance_bin_m).astype(int)
        for b in sorted(set(idx.tolist())):
            sel = idx == b
            bins.append((b * distance_bin_m, (b + 1) * distance_bin_m, int(sel.sum()), float(hits[sel].mean())))
    return EvalReport(len(cases), accuracy, bleu(cases), horizon_acc, bins)

