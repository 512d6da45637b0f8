"""Evaluation metrics: disambiguation accuracy, baselines, BLEU, verb accuracy."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .corpus import majority_label

BLEU_ORDER = 4


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    n: int
    per_label_counts: dict  # gold label -> (correct, total)


@dataclass(frozen=True)
class BleuReport:
    bleu: float                    # 0..100
    precisions: tuple              # 4 clipped n-gram precisions in [0, 1]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def accuracy(predictions, golds) -> EvalReport:
    """Exact-match accuracy with per-gold-label tallies."""
    predictions = list(predictions)
    golds = list(golds)
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not golds:
        raise ValueError("empty evaluation set")
    per_label: dict = {}
    correct = 0
    for p, g in zip(predictions, golds):
        c, t = per_label.get(g, (0, 0))
        hit = int(p == g)
        per_label[g] = (c + hit, t + 1)
        correct += hit
    return EvalReport(accuracy=correct / len(golds), n=len(golds), per_label_counts=per_label)


def chance_baseline(n_labels: int) -> float:
    """Expected accuracy of uniform random guessing over ``n_labels``."""
    if n_labels < 1:
        raise ValueError("need at least one label")
    return 1.0 / n_labels


def majority_baseline_accuracy(train_samples, eval_samples) -> float:
    """Accuracy of always predicting the training split's majority verb."""
    eval_samples = list(eval_samples)
    if not eval_samples:
        raise ValueError("empty evaluation set")
    majority = majority_label(train_samples)
    hits = sum(1 for s in eval_samples if s.target_verb == majority)
    return hits / len(eval_samples)


def _ngram_counts(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_corpus(hypotheses, references) -> BleuReport:
    """Corpus BLEU-4: uniform weights, clipped counts, single reference, no smoothing.

    Counts are aggregated over the corpus before forming precisions. Segments
    shorter than n contribute no n-grams; if the whole corpus has zero n-grams
    at any order, that precision is 0 and the score is 0. The brevity penalty
    is exp(1 - ref_len/hyp_len) when the hypothesis side is shorter, else 1.
    """
    hypotheses = [list(h) for h in hypotheses]
    references = [list(r) for r in references]
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")

    clipped = [0] * BLEU_ORDER
    total = [0] * BLEU_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, BLEU_ORDER + 1):
            hyp_counts = _ngram_counts(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngram_counts(ref, n)
            total[n - 1] += sum(hyp_counts.values())
            clipped[n - 1] += sum(
                min(c, ref_counts.get(g, 0)) for g, c in hyp_counts.items()
            )

    precisions = tuple(c / t if t > 0 else 0.0 for c, t in zip(clipped, total))
    if hyp_len == 0:
        brevity_penalty = 0.0
    elif hyp_len < ref_len:
        brevity_penalty = math.exp(1.0 - ref_len / hyp_len)
    else:
        brevity_penalty = 1.0

    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        log_mean = math.fsum(math.log(p) for p in precisions) / BLEU_ORDER
        score = 100.0 * brevity_penalty * math.exp(log_mean)
    return BleuReport(bleu=score, precisions=precisions,
                      brevity_penalty=brevity_penalty, hyp_len=hyp_len, ref_len=ref_len)


def verb_accuracy(hypotheses, gold_verbs) -> float:
    """Fraction of hypotheses containing their gold verb as a token.

    Matching is exact on case-folded surface forms, not lemmas: an inflected
    or out-of-vocabulary rendering of the verb does not count.
    """
    hypotheses = [list(h) for h in hypotheses]
    gold_verbs = list(gold_verbs)
    if len(hypotheses) != len(gold_verbs):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(gold_verbs)} gold verbs")
    if not gold_verbs:
        raise ValueError("empty evaluation set")
    hits = 0
    for hyp, verb in zip(hypotheses, gold_verbs):
        folded = {t.lower() for t in hyp}
        if verb.lower() in folded:
            hits += 1
    return hits / len(gold_verbs)
