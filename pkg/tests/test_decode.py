import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import RandomModel, UniformModel, disk_vocab, vocab_of
from hextraj import hexgrid as hg
from hextraj.corpus import EOT, UnknownCellError
from hextraj.decode import (BeamConfig, Hypothesis, SuccessorTable, allowed_successors, beam_search, beam_search_batch,
                            exhaustive_search, is_valid_path)
from hextraj.hexgrid import HexCell

ORIGIN = HexCell(9, 0, 0)


def test_allowed_successor_counts():
    vocab = disk_vocab(2)
    assert allowed_successors(ORIGIN, vocab) == {vocab.id_of(n) for n in hg.neighbors(ORIGIN)} | {EOT}
    assert len(allowed_successors(ORIGIN, vocab)) == 7
    edge = vocab_of([ORIGIN, HexCell(9, 1, 0), HexCell(9, 0, 1), HexCell(9, 5, 5)])
    assert len(allowed_successors(ORIGIN, edge)) == 3
    lonely = vocab_of([HexCell(9, 5, 5)])
    assert allowed_successors(HexCell(9, 5, 5), lonely) == {EOT}
    with pytest.raises(UnknownCellError):
        allowed_successors(HexCell(9, 9, 9), vocab)
    with pytest.raises(UnknownCellError):
        SuccessorTable(vocab).allowed(EOT)


def test_unconstrained_table_allows_everything_but_pad():
    vocab = disk_vocab(1)
    assert SuccessorTable(vocab, constrained=False).allowed(2).tolist() == list(range(1, len(vocab)))


def greedy(model, prefix, k, table):
    seq, score = list(prefix), 0.0
    for _ in range(k):
        lp = model.next_log_probs([seq])[0]
        allowed = table.allowed(seq[-1])
        z = lp[allowed] - np.logaddexp.reduce(lp[allowed])
        j = int(np.argmax(z))
        seq.append(int(allowed[j]))
        score += z[j]
        if seq[-1] == EOT:
            break
    return tuple(seq[len(prefix):]), score


@pytest.mark.parametrize("seed", range(5))
def test_width_one_is_greedy(seed):
    vocab = disk_vocab(3)
    table = SuccessorTable(vocab)
    model = RandomModel(len(vocab), seed)
    prefix = [vocab.id_of(ORIGIN)]
    hyp = beam_search(model, prefix, BeamConfig(1, 5), table)[0]
    gen, score = greedy(model, prefix, 5, table)
    assert hyp.generated == gen and hyp.score == pytest.approx(score, abs=1e-12)


def test_toy_three_cell_model():
    cells = [ORIGIN, HexCell(9, 1, 0), HexCell(9, 1, -1)]  # mutually adjacent
    vocab = vocab_of(cells)
    table = SuccessorTable(vocab)
    model = RandomModel(len(vocab), seed=11, scale=1.5)
    prefix = [vocab.id_of(ORIGIN)]
    for k in (1, 2, 3):
        # brute-force argmax over every valid path, EOT-terminated or full length
        best = None
        for n in range(1, k + 1):
            for gen in itertools.product(range(1, len(vocab)), repeat=n):
                if EOT in gen[:-1] or (n < k and gen[-1] != EOT):
                    continue
                seq, s, ok = list(prefix), 0.0, True
                for t in gen:
                    allowed = table.allowed(seq[-1])
                    if t not in allowed:
                        ok = False
                        break
                    lp = model.next_log_probs([seq])[0][allowed]
                    s += lp[list(allowed).index(t)] - np.logaddexp.reduce(lp)
                    seq.append(t)
                if ok and (best is None or s > best[1]):
                    best = (gen, s)
        top = beam_search(model, prefix, BeamConfig(7**k, k), table)[0]
        assert top.generated == best[0] and top.score == pytest.approx(best[1], abs=1e-12)
        assert exhaustive_search(model, prefix, k, table).generated == best[0]


def test_exhaustive_k1_is_argmax():
    vocab = disk_vocab(2)
    table = SuccessorTable(vocab)
    model = RandomModel(len(vocab), 3)
    prefix = [vocab.id_of(ORIGIN)]
    allowed = table.allowed(prefix[-1])
    lp = model.next_log_probs([prefix])[0][allowed]
    assert exhaustive_search(model, prefix, 1, table).generated == (int(allowed[np.argmax(lp)]),)


def test_exhaustive_limits():
    vocab = disk_vocab(2)
    table = SuccessorTable(vocab)
    model = RandomModel(len(vocab))
    with pytest.raises(ValueError):
        exhaustive_search(model, [2], 6, table)
    with pytest.raises(ValueError):
        exhaustive_search(model, [2], 2, SuccessorTable(vocab, constrained=False))


def test_uniform_model_orders_lexicographically():
    vocab = disk_vocab(3)
    table = SuccessorTable(vocab)
    prefix = [vocab.id_of(ORIGIN)]
    hyps = beam_search(UniformModel(len(vocab)), prefix, BeamConfig(5, 3), table)
    # every allowed step has probability 1/7, so the EOT-first hypothesis wins
    assert hyps[0].generated == (EOT,) and hyps[0].score == pytest.approx(-math.log(7))
    assert hyps == sorted(hyps, key=lambda h: (-h.score, h.generated))
    same = [h for h in hyps if len(h.generated) == 3]
    assert all(h.score == pytest.approx(-3 * math.log(7)) for h in same)
    assert [h.generated for h in same] == sorted(h.generated for h in same)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_wider_beam_never_lowers_top_score(seed, k):
    vocab = disk_vocab(3)
    table = SuccessorTable(vocab)
    model = RandomModel(len(vocab), seed)
    prefix = [vocab.id_of(HexCell(9, 1, -1)), vocab.id_of(ORIGIN)]
    tops = [beam_search(model, prefix, BeamConfig(w, k), table)[0].score for w in range(1, 8)]
    assert all(b >= a - 1e-12 for a, b in zip(tops, tops[1:]))
    assert exhaustive_search(model, prefix, k, table).score >= tops[-1] - 1e-12


def test_scores_and_validity():
    vocab = disk_vocab(4)
    table = SuccessorTable(vocab)
    for seed in range(10):
        model = RandomModel(len(vocab), seed)
        hyps = beam_search(model, [vocab.id_of(ORIGIN)], BeamConfig(5, 5), table)
        assert 1 <= len(hyps) <= 5
        assert [h.score for h in hyps] == sorted((h.score for h in hyps), reverse=True)
        for h in hyps:
            assert is_valid_path(h, vocab) and h.score <= 0
            assert EOT not in h.generated[:-1] and h.finished == (h.generated[-1] == EOT)


def test_invalid_path_detected():
    vocab = disk_vocab(2)
    o, far = vocab.id_of(ORIGIN), vocab.id_of(HexCell(9, 2, 0))
    assert not is_valid_path(Hypothesis((o,), (far,), 0.0, False), vocab)
    assert not is_valid_path(Hypothesis((o,), (EOT, far), 0.0, False), vocab)


def test_work_bound_and_determinism():
    vocab = disk_vocab(4)
    table = SuccessorTable(vocab)
    model = RandomModel(len(vocab), 7)
    prefix = [vocab.id_of(ORIGIN)]
    rows = []
    orig = model.next_log_probs

    def counting(contexts):
        rows.append(len(contexts))
        return orig(contexts)

    model.next_log_probs = counting
    a = beam_search(model, prefix, BeamConfig(5, 5), table)
    assert len(rows) <= 5 and sum(rows) <= 5 * 5
    assert a == beam_search(model, prefix, BeamConfig(5, 5), table)


def test_batch_matches_single():
    vocab = disk_vocab(4)
    table = SuccessorTable(vocab)
    model = RandomModel(len(vocab), 8)
    prefixes = [[vocab.id_of(c)] for c in hg.hex_disk(ORIGIN, 2)]
    cfg = BeamConfig(3, 4)
    batched = beam_search_batch(model, prefixes, cfg, table, max_rows=7)
    assert batched == [beam_search(model, p, cfg, table) for p in prefixes]


def test_prefix_is_left_truncated():
    vocab = disk_vocab(4)
    table = SuccessorTable(vocab)
    model = RandomModel(len(vocab), 9, context_len=6)
    path = [vocab.id_of(HexCell(9, i, 0)) for i in range(-4, 4)]
    hyps = beam_search(model, path, BeamConfig(2, 2), table)
    assert hyps[0].prefix == tuple(path[-4:])
    with pytest.raises(ValueError):
        beam_search(model, [], BeamConfig(2, 2), table)
    with pytest.raises(ValueError):
        BeamConfig(0, 2)
