"""First-order Markov-chain baseline over the same legal-successor support as decoding."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .corpus import EOT, PAD
from .decode import SuccessorTable


class MarkovModel:
    """Transition counts between consecutive tokens, smoothed over legal successors.

    With add-one smoothing ``P(b|a) = (n(a,b) + 1) / (n(a) + |S(a)|)`` where
    ``S(a)`` is the legal successor set and ``n(a)`` counts only transitions
    into it.  States never seen in training get the uniform distribution on
    ``S(a)``.
    """

    def __init__(self, table: SuccessorTable, smoothing: bool = True, context_len: int = 64):
        self.table = table
        self.smoothing = smoothing
        self.vocab_size = len(table.vocab)
        self.context_len = context_len
        self.counts: dict[int, dict[int, int]] = {}

    def fit(self, sequences: Iterable[Sequence[int]]) -> MarkovModel:
        counts: dict[int, dict[int, int]] = {}
        for seq in sequences:
            for a, b in zip(seq[:-1], seq[1:]):
                if a in (PAD, EOT):
                    continue
                row = counts.setdefault(int(a), {})
                row[int(b)] = row.get(int(b), 0) + 1
        self.counts = counts
        return self

    def distribution(self, token_id: int) -> tuple[np.ndarray, np.ndarray]:
        """``(support ids, probabilities)`` for the successor of ``token_id``."""
        support = self.table.allowed(token_id)
        row = self.counts.get(int(token_id), {})
        n = np.array([row.get(int(s), 0) for s in support], dtype=np.float64)
        if self.smoothing:
            n += 1.0
        total = n.sum()
        if total == 0:
            return support, np.full(len(support), 1.0 / len(support))
        return support, n / total

    def next_distribution(self, token_id: int) -> np.ndarray:
        probs = np.zeros(self.vocab_size)
        support, p = self.distribution(token_id)
        probs[support] = p
        return probs

    def next_log_probs(self, contexts: Sequence[Sequence[int]]) -> np.ndarray:
        out = np.empty((len(contexts), self.vocab_size))
        with np.errstate(divide="ignore"):
            for i, ctx in enumerate(contexts):
                out[i] = np.log(self.next_distribution(int(ctx[-1])))
        return out


def mc_fit(sequences, table: SuccessorTable, smoothing: bool = True) -> MarkovModel:
    return MarkovModel(table, smoothing=smoothing).fit(sequences)
