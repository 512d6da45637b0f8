import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from verbsense.metrics import (
    accuracy, bleu_corpus, chance_baseline, majority_baseline_accuracy,
    verb_accuracy,
)

from conftest import make_samples


def samples_with_targets(targets, split="train"):
    return make_samples([
        (f"s{i}", "q", "v", t, split, i) for i, t in enumerate(targets)
    ])


class TestAccuracy:
    def test_all_correct(self):
        report = accuracy([0, 1, 2, 1, 0], [0, 1, 2, 1, 0])
        assert report.accuracy == 1.0 and report.n == 5

    def test_all_wrong(self):
        assert accuracy([1, 1], [0, 0]).accuracy == 0.0

    def test_three_of_four(self):
        assert accuracy([0, 1, 2, 2], [0, 1, 2, 3]).accuracy == 0.75

    def test_per_label_counts_sum_to_accuracy(self):
        report = accuracy([0, 1, 0, 2], [0, 1, 1, 2])
        total_correct = sum(c for c, _ in report.per_label_counts.values())
        total = sum(t for _, t in report.per_label_counts.values())
        assert total == report.n
        assert report.accuracy == total_correct / total

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy([0], [0, 1])

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy([], [])


class TestChanceBaseline:
    def test_paper_vocab_sizes(self):
        # printed as 0.7% for both languages at the table's one-decimal resolution
        assert chance_baseline(154) == 1 / 154
        assert abs(100 * chance_baseline(154) - 0.7) < 0.1
        assert round(100 * chance_baseline(136), 1) == 0.7

    def test_single_label(self):
        assert chance_baseline(1) == 1.0

    def test_reciprocal_exact_at_anchor_sizes(self):
        for v in (1, 2, 3, 136, 154):
            assert chance_baseline(v) * v == 1.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            chance_baseline(0)


class TestMajorityBaseline:
    def test_eval_all_majority(self):
        train = samples_with_targets(["a", "a", "b"])
        ev = samples_with_targets(["a", "a"], split="test")
        assert majority_baseline_accuracy(train, ev) == 1.0

    def test_majority_absent_from_eval(self):
        train = samples_with_targets(["a", "a", "b"])
        ev = samples_with_targets(["b", "c"], split="test")
        assert majority_baseline_accuracy(train, ev) == 0.0

    def test_mixed(self):
        train = samples_with_targets(["a", "a", "b"])
        ev = samples_with_targets(["a", "b", "a", "c"], split="test")
        assert majority_baseline_accuracy(train, ev) == 0.5


class TestBleu:
    def test_identity_is_100(self):
        corpus = [["the", "cat", "sat", "down"], ["a", "b", "c", "d", "e"]]
        report = bleu_corpus(corpus, corpus)
        assert report.bleu == pytest.approx(100.0, abs=1e-9)
        assert report.brevity_penalty == 1.0

    def test_clipped_unigram_counts(self):
        # "the" appears once in the reference, so only one of four copies counts
        report = bleu_corpus([["the", "the", "the", "the"]],
                             [["the", "cat", "sat", "down"]])
        assert report.precisions[0] == pytest.approx(0.25)
        assert report.bleu == 0.0  # no bigram survives

    def test_brevity_penalty_hand_case(self):
        # all precisions are 1; BP = exp(1 - 5/4)
        report = bleu_corpus([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
        assert report.precisions == (1.0, 1.0, 1.0, 1.0)
        assert report.brevity_penalty == pytest.approx(math.exp(-0.25), abs=1e-12)
        assert report.bleu == pytest.approx(77.8800783071405, abs=1e-6)

    def test_internal_consistency(self):
        rng = np.random.default_rng(0)
        vocab = list("abcdefg")
        for _ in range(20):
            hyps = [[vocab[i] for i in rng.integers(0, 7, size=rng.integers(4, 9))]
                    for _ in range(4)]
            refs = [[vocab[i] for i in rng.integers(0, 7, size=rng.integers(4, 9))]
                    for _ in range(4)]
            r = bleu_corpus(hyps, refs)
            if all(p > 0 for p in r.precisions):
                expect = 100 * r.brevity_penalty * math.exp(
                    sum(math.log(p) for p in r.precisions) / 4)
                assert r.bleu == pytest.approx(expect, abs=1e-9)
            else:
                assert r.bleu == 0.0

    def test_corpus_permutation_invariant(self):
        hyps = [["a", "b", "c", "d"], ["b", "c"], ["d", "d", "e", "a", "b"]]
        refs = [["a", "b", "c", "e"], ["b", "c"], ["d", "e", "a", "b"]]
        base = bleu_corpus(hyps, refs)
        perm = [2, 0, 1]
        shuffled = bleu_corpus([hyps[i] for i in perm], [refs[i] for i in perm])
        assert shuffled == base

    def test_short_segments_only_real_ngrams_counted(self):
        # 2-token segments contribute no trigrams or 4-grams at all
        report = bleu_corpus([["a", "b"]], [["a", "b"]])
        assert report.precisions[0] == 1.0 and report.precisions[1] == 1.0
        assert report.precisions[2] == 0.0 and report.precisions[3] == 0.0
        assert report.bleu == 0.0

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            bleu_corpus([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bleu_corpus([["a"]], [["a"], ["b"]])


class TestVerbAccuracy:
    def test_contained(self):
        hyp = ["eine", "herde", "blockiert", "die", "straße"]
        assert verb_accuracy([hyp], ["blockiert"]) == 1.0

    def test_wrong_verb_not_counted(self):
        assert verb_accuracy([["er", "will", "fahren"]], ["reiten"]) == 0.0

    def test_case_folded_match(self):
        assert verb_accuracy([["sie", "reiten"]], ["Reiten"]) == 1.0

    def test_adding_gold_token_forces_one(self):
        rng = np.random.default_rng(1)
        hyps = [[str(t) for t in rng.integers(0, 5, size=4)] for _ in range(10)]
        verbs = [str(rng.integers(10, 20)) for _ in range(10)]
        spiked = [h + [v] for h, v in zip(hyps, verbs)]
        assert verb_accuracy(spiked, verbs) == 1.0

    @given(st.lists(st.sampled_from(["geht", "reiten", "fahren"]), min_size=1,
                    max_size=6))
    def test_bounded(self, tokens):
        value = verb_accuracy([tokens], ["reiten"])
        assert value in (0.0, 1.0)
        assert value == float("reiten" in tokens)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            verb_accuracy([["a"]], [])
