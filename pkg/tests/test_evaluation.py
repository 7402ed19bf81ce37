import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import RandomModel, SuccessorModel, UniformModel, disk_vocab
from hextraj import corpus, synthetic
from hextraj import evaluation as E
from hextraj.corpus import EOT
from hextraj.decode import SuccessorTable
from hextraj.hexgrid import GridSpec, HexCell

SPEC = GridSpec(anchor_lat=41.15, anchor_lon=-8.61)


def case(truth, *preds):
    return E.EvalCase((2,), tuple(truth), [tuple(p) for p in preds])


# -- accuracy ------------------------------------------------------------------

def test_three_of_four():
    cases = [case([3, 4], [3, 4]), case([5], [5]), case([6, 7], [6, 7]), case([8], [9], [8])]
    assert E.accuracy_at_n(cases, 1) == 0.75
    assert E.accuracy_at_n(cases, 3) == 1.0


def test_identity_and_missing_predictions():
    cases = [case([3, 4, 5], [3, 4, 5]), case([6], [6])]
    assert all(E.accuracy_at_n(cases, n) == 1.0 for n in (1, 3, 5))
    assert E.accuracy_at_n([case([3])], 1) == 0.0
    with pytest.raises(ValueError):
        E.accuracy_at_n([], 1)


def test_prefix_of_truth_does_not_match():
    assert E.accuracy_at_n([case([3, 4], [3])], 1) == 0.0
    assert E.truncate_eot([3, 4, EOT, 5]) == (3, 4)


@given(st.lists(st.tuples(st.lists(st.integers(2, 4), max_size=3),
                          st.lists(st.lists(st.integers(2, 4), max_size=3), max_size=5)), min_size=1))
def test_accuracy_nested_in_n(data):
    cases = [case(t, *ps) for t, ps in data]
    accs = [E.accuracy_at_n(cases, n) for n in (1, 3, 5)]
    assert all(0.0 <= a <= 1.0 for a in accs)
    assert accs[0] <= accs[1] <= accs[2]


# -- BLEU ----------------------------------------------------------------------

def test_bleu_identity():
    refs = [(3, 4, 5, 6, 7), (8, 9, 10, 11)]
    assert E.bleu_score(refs, refs) == 1.0


def test_brevity_penalty_four_fifths():
    assert E.brevity_penalty(4, 5) == pytest.approx(math.exp(-0.25), abs=1e-9)
    assert E.brevity_penalty(4, 5) == pytest.approx(0.77880, abs=1e-5)
    assert E.brevity_penalty(6, 5) == 1.0 and E.brevity_penalty(0, 5) == 0.0
    # a truncated-but-correct candidate: every precision is 1, only BP applies
    assert E.bleu_score([(1, 2, 3, 4)], [(1, 2, 3, 4, 5)]) == pytest.approx(math.exp(-0.25), abs=1e-9)


def test_hand_counted_ngrams():
    # a b c d e vs a b c x e: 4/5 unigrams, ab bc of 4 bigrams, abc of 3 trigrams, no 4-gram
    p = E.modified_precisions([(1, 2, 3, 4, 5)], [(1, 2, 3, 9, 5)])
    assert p == [(4, 5), (2, 4), (1, 3), (0, 2)]
    assert E.bleu_score([(1, 2, 3, 4, 5)], [(1, 2, 3, 9, 5)]) == 0.0
    # one substitution at the end keeps 4/5, 3/4, 2/3, 1/2
    got = E.bleu_score([(1, 2, 3, 4, 5)], [(1, 2, 3, 4, 6)])
    assert got == pytest.approx((4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25, abs=1e-9)


def test_clipping():
    assert E.modified_precisions([(7, 7, 7, 7)], [(7, 7)])[:2] == [(2, 4), (1, 3)]
    unclipped = E.modified_precisions([(7, 7, 7, 7)], [(7, 7)], E.BleuParams(clip=False))
    assert unclipped[0] == (4, 4)


def test_corpus_level_aggregation():
    # the short second case has no 4-grams, the corpus still does
    cands, refs = [(1, 2, 3, 4, 5), (6, 7)], [(1, 2, 3, 4, 5), (6, 7)]
    assert E.modified_precisions(cands, refs)[3] == (2, 2)
    assert E.bleu_score(cands, refs) == 1.0


def test_bleu_degenerate():
    assert E.bleu_score([()], [(1, 2)]) == 0.0
    assert sum(E.BleuParams().weights) == 1.0
    with pytest.raises(ValueError):
        E.bleu([])


# -- cases and evaluation ------------------------------------------------------

def test_build_cases_windows():
    seq = list(range(2, 18)) + [EOT]
    cases = E.build_cases([seq], 10, 5)
    assert len(cases) == 3
    assert cases[0].prefix == tuple(range(2, 12)) and cases[0].truth == tuple(range(12, 17))
    assert cases[-1].truth == (14, 15, 16, 17)


@pytest.fixture(scope="module")
def turn_rule():
    sc = synthetic.turn_rule_corpus(80, width=20, height=8, seed=5)
    vocab = corpus.build_vocab(corpus.split_by_start_time(sc.trajectories))
    nxt = {vocab.id_of(c): (vocab.id_of(n) if n is not None else EOT) for c, n in sc.fields["right"].items()
           if c.token in vocab.stoi}
    seqs = [vocab.encode(t) for t in sc.trajectories]
    return vocab, nxt, seqs


def test_oracle_model_scores_one(turn_rule):
    vocab, nxt, seqs = turn_rule
    table = SuccessorTable(vocab)
    rep = E.evaluate(SuccessorModel(len(vocab), nxt), seqs, table, 10, 5, 5, spec=SPEC)
    assert rep.n_cases > 100
    assert all(v == 1.0 for v in rep.accuracy.values()) and rep.bleu == 1.0
    assert sorted(rep.horizon_accuracy) == [1, 2, 3, 4, 5] and set(rep.horizon_accuracy.values()) == {1.0}
    assert sum(n for _, _, n, _ in rep.distance_bins) == rep.n_cases
    assert all(acc == 1.0 for *_, acc in rep.distance_bins)


def test_report_is_deterministic_and_monotone(turn_rule):
    vocab, _, seqs = turn_rule
    table = SuccessorTable(vocab)
    model = RandomModel(len(vocab), 4)
    a = E.evaluate(model, seqs[:20], table, 10, 5, 5)
    b = E.evaluate(model, seqs[:20], table, 10, 5, 5)
    assert a.to_csv("h", 0) == b.to_csv("h", 0)
    assert a.accuracy[1] <= a.accuracy[3] <= a.accuracy[5]
    lines = a.to_csv("cafe", 3).splitlines()
    assert lines[0] == "metric,value,config_hash,seed" and lines[1].endswith(",cafe,3")
    assert "acc@1" in a.to_text()


def test_uniform_model_match_rate():
    vocab = disk_vocab(6)
    table = SuccessorTable(vocab)
    rng = np.random.default_rng(0)
    interior = [vocab.id_of(c) for c in vocab.cells[2:] if len(table.allowed(vocab.id_of(c))) == 7]
    for k in (1, 3):
        cases = []
        for _ in range(7000):
            seq = [int(rng.choice(interior))]
            while len(seq) < 1 + k and seq[-1] != EOT:
                seq.append(int(rng.choice(table.allowed(seq[-1]))))
            cases.append(E.EvalCase(tuple(seq[:1]), E.truncate_eot(seq[1:])))
        acc = E.accuracy_at_n(E.predict_cases(UniformModel(len(vocab)), cases, table, k, 5), 1)
        # ties resolve to the immediate-EOT path, which a random walk takes with probability 1/7
        sd = math.sqrt(1 / 7 * 6 / 7 / len(cases))
        assert abs(acc - 1 / 7) < 4 * sd


def test_first_order_cap():
    cases = [E.EvalCase((5, 2), (3,)), E.EvalCase((6, 2), (4,)), E.EvalCase((7, 2), (3,)), E.EvalCase((2, 9), (8,))]
    assert E.first_order_cap(cases) == 0.75


def test_travel_distance():
    vocab = disk_vocab(2)
    o, e = vocab.id_of(HexCell(9, 0, 0)), vocab.id_of(HexCell(9, 1, 0))
    d = E.travel_distance(E.EvalCase((o,), (e, o)), vocab.cells, SPEC)
    assert d == pytest.approx(2 * math.sqrt(3) * SPEC.edge(9))
