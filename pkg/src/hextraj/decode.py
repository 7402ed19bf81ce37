"""Adjacency-constrained beam search and its exhaustive-search oracle.

A *model* here is anything with ``vocab_size``, ``context_len`` and
``next_log_probs(contexts) -> n x V`` array; both the transformer and the
Markov baseline qualify.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import hexgrid
from .corpus import EOT, PAD, UnknownCellError, Vocabulary

MAX_EXHAUSTIVE_PATHS = 7**5


class SearchError(RuntimeError):
    """Internal invariant violation during search."""


class SuccessorTable:
    """Legal next tokens for every token id: adjacent cells in the vocabulary plus EOT.

    ``neighbor_fn`` defaults to the six same-resolution neighbors; pass a
    mixed map's ``mixed_neighbors`` for hierarchical maps.  With
    ``constrained=False`` every non-PAD token is allowed (ablation).
    """

    def __init__(self, vocab: Vocabulary, neighbor_fn: Callable | None = None, constrained: bool = True):
        self.vocab = vocab
        self.constrained = constrained
        neighbor_fn = neighbor_fn or hexgrid.neighbors
        self._all = np.arange(1, len(vocab), dtype=np.int64)
        self._table: list = [None, None]
        for idx in range(2, len(vocab)):
            ids = {vocab.stoi[n.token] for n in neighbor_fn(vocab.cells[idx]) if n.token in vocab.stoi}
            ids.add(EOT)
            self._table.append(np.array(sorted(ids), dtype=np.int64))

    def allowed(self, token_id: int) -> np.ndarray:
        if token_id in (PAD, EOT) or not 0 <= token_id < len(self.vocab):
            raise UnknownCellError(f"token id {token_id} is not a cell")
        return self._table[token_id] if self.constrained else self._all

    def allowed_for_cell(self, cell) -> np.ndarray:
        return self.allowed(self.vocab.id_of(cell))


def allowed_successors(last_cell, vocab: Vocabulary, neighbor_fn: Callable | None = None) -> set[int]:
    return set(SuccessorTable(vocab, neighbor_fn).allowed_for_cell(last_cell).tolist())


@dataclass(frozen=True)
class BeamConfig:
    width: int = 5
    horizon: int = 5
    renormalize: bool = True

    def __post_init__(self):
        if self.width < 1 or self.horizon < 1:
            raise ValueError("beam width and horizon must be >= 1")


@dataclass(frozen=True)
class Hypothesis:
    prefix: tuple
    generated: tuple
    score: float
    finished: bool

    @property
    def tokens(self) -> tuple:
        return self.prefix + self.generated

    @property
    def path(self) -> tuple:
        """Generated tokens without the trailing EOT."""
        return self.generated[:-1] if self.finished else self.generated


def _step_scores(logp: np.ndarray, allowed: np.ndarray, renormalize: bool) -> np.ndarray:
    lp = logp[allowed]
    if renormalize:
        m = lp.max()
        if np.isfinite(m):
            lp = lp - (m + np.log(np.exp(lp - m).sum()))
    return lp


def _rank_key(h):
    return (-h[1], h[0])


def _context(prefix, generated, context_len):
    ctx = prefix + generated
    return ctx[-context_len:]


def _trim_prefix(prefix, context_len, horizon):
    prefix = tuple(int(t) for t in prefix)
    if not prefix:
        raise ValueError("prefix must contain at least one token")
    if EOT in prefix or PAD in prefix:
        raise ValueError("prefix must contain cell tokens only")
    keep = max(1, context_len - horizon)
    return prefix[-keep:]


def beam_search_batch(model, prefixes: Sequence[Sequence[int]], cfg: BeamConfig, table: SuccessorTable,
                      max_rows: int = 2048) -> list[list[Hypothesis]]:
    """Run independent beam searches in lockstep, batching model calls across them."""
    prefixes = [_trim_prefix(p, model.context_len, cfg.horizon) for p in prefixes]
    # each beam: list of (generated, score, finished)
    beams = [[((), 0.0, False)] for _ in prefixes]
    for _ in range(cfg.horizon):
        jobs = [(b, h) for b, beam in enumerate(beams) for h in beam if not h[2]]
        if not jobs:
            break
        contexts = [_context(prefixes[b], h[0], model.context_len) for b, h in jobs]
        logps = np.concatenate([model.next_log_probs(contexts[i:i + max_rows])
                                for i in range(0, len(contexts), max_rows)])
        candidates = [[h for h in beam if h[2]] for beam in beams]
        for (b, (gen, score, _)), logp in zip(jobs, logps):
            last = gen[-1] if gen else prefixes[b][-1]
            allowed = table.allowed(last)
            if len(allowed) == 0:
                raise SearchError(f"no legal successor for token {last}")
            for tok, lp in zip(allowed.tolist(), _step_scores(logp, allowed, cfg.renormalize).tolist()):
                candidates[b].append((gen + (tok,), score + lp, tok == EOT))
        beams = [sorted(c, key=_rank_key)[: cfg.width] for c in candidates]
    return [
        [Hypothesis(prefixes[b], g, s, f) for g, s, f in sorted(beam, key=_rank_key)]
        for b, beam in enumerate(beams)
    ]


def beam_search(model, prefix: Sequence[int], cfg: BeamConfig, table: SuccessorTable) -> list[Hypothesis]:
    """Top ``cfg.width`` continuations of ``prefix``, best first.

    Each step expands unfinished hypotheses over legal successors, adds the
    log-probability (renormalized over the legal set when configured) and
    keeps the best ``width``; ties break on the token sequence.  Hypotheses
    that emitted EOT stay in the beam unexpanded.
    """
    return beam_search_batch(model, [prefix], cfg, table)[0]


def exhaustive_search(model, prefix: Sequence[int], k: int, table: SuccessorTable,
                      renormalize: bool = True) -> Hypothesis:
    """Best legal path of at most ``k`` steps by full enumeration (test oracle)."""
    if k > 5:
        raise ValueError("exhaustive search is limited to k <= 5")
    prefix = _trim_prefix(prefix, model.context_len, k)
    best = None
    frontier = [((), 0.0)]
    n_paths = 0
    for depth in range(k):
        contexts = [_context(prefix, g, model.context_len) for g, _ in frontier]
        logps = model.next_log_probs(contexts) if contexts else []
        nxt = []
        for (gen, score), logp in zip(frontier, logps):
            allowed = table.allowed(gen[-1] if gen else prefix[-1])
            if len(allowed) > 7:
                raise ValueError("exhaustive search needs branching <= 7")
            for tok, lp in zip(allowed.tolist(), _step_scores(logp, allowed, renormalize).tolist()):
                path = (gen + (tok,), score + lp)
                if tok == EOT or depth == k - 1:
                    n_paths += 1
                    if best is None or _rank_key(path) < _rank_key(best):
                        best = path
                else:
                    nxt.append(path)
        if n_paths + len(nxt) > MAX_EXHAUSTIVE_PATHS:
            raise ValueError("combinatorial bound exceeded")
        frontier = nxt
    gen, score = best
    return Hypothesis(prefix, gen, score, gen[-1] == EOT)


def is_valid_path(hyp: Hypothesis, vocab: Vocabulary, neighbor_fn: Callable | None = None) -> bool:
    """Every generated cell is adjacent to its predecessor; EOT only at the end."""
    neighbor_fn = neighbor_fn or hexgrid.neighbors
    prev = vocab.cells[hyp.prefix[-1]]
    for i, tok in enumerate(hyp.generated):
        if tok == EOT:
            return i == len(hyp.generated) - 1
        cell = vocab.cell_of(tok)
        if cell is None or cell not in neighbor_fn(prev):
            return False
        prev = cell
    return True


def paths(hyps: Iterable[Hypothesis]) -> list[tuple]:
    return [h.path for h in hyps]
