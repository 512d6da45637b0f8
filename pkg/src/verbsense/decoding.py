"""Beam search with lexical constraints over a pluggable next-token scorer.

The decoder forces given token sequences to appear contiguously in its
output. It partitions the beam into banks indexed by the number of
constraint tokens a hypothesis has satisfied, so partially constrained
hypotheses survive pruning; candidates are the scorer's top expansions plus
forced expansions with the next needed token of every open constraint.

A scorer is anything with ``vocab_size``, ``eos``, and
``score(prefix) -> log-probability vector``. Two are provided: an in-memory
n-gram table scorer for tests and demos, and a file-driven scorer that
replays per-prefix distributions exported by an external translation system.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np


class ScorerError(ValueError):
    """Raised for malformed or incomplete scorer tables."""


class InfeasibleConstraintError(RuntimeError):
    """Raised when no hypothesis satisfying every constraint can be produced."""


class StepScorer(Protocol):
    vocab_size: int
    eos: int

    def score(self, prefix) -> np.ndarray:
        """Log-probability vector over the vocabulary given a token-id prefix."""
        ...


def assert_log_distribution(vec, vocab_size: int, tol: float = 1e-5) -> np.ndarray:
    """Validate that ``vec`` is a length-``vocab_size`` log-distribution."""
    arr = np.asarray(vec, dtype=np.float64)
    if arr.shape != (vocab_size,):
        raise ScorerError(f"distribution has shape {arr.shape}, expected ({vocab_size},)")
    if np.isnan(arr).any():
        raise ScorerError("distribution contains NaN")
    lse = np.logaddexp.reduce(arr)
    if not abs(lse) <= tol:
        raise ScorerError(f"log-probabilities do not normalize (logsumexp={lse:.3g})")
    return arr


class NgramTableScorer:
    """Deterministic scorer keyed on the last ``order - 1`` tokens."""

    def __init__(self, vocab_size: int, eos: int, order: int, table: dict):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.vocab_size = vocab_size
        self.eos = eos
        self.order = order
        self.table = {
            tuple(k): assert_log_distribution(v, vocab_size) for k, v in table.items()
        }

    def context(self, prefix) -> tuple:
        if self.order == 1:
            return ()
        return tuple(prefix[-(self.order - 1):])

    def score(self, prefix) -> np.ndarray:
        key = self.context(prefix)
        if key not in self.table:
            raise ScorerError(f"no distribution for context {list(key)}")
        return self.table[key]


def random_ngram_scorer(vocab_size: int, eos: int, seed: int,
                        order: int = 2) -> NgramTableScorer:
    """Seeded random scorer covering every possible context; for tests/demos."""
    rng = np.random.default_rng(seed)
    contexts = [()]
    for _ in range(order - 1):
        contexts = [c + (t,) for c in contexts for t in range(vocab_size)]
    table = {}
    for ctx in contexts:
        logits = rng.normal(size=vocab_size)
        table[ctx] = logits - np.logaddexp.reduce(logits)
    return NgramTableScorer(vocab_size, eos, order, table)


class ReplayScorer:
    """Scorer replaying per-prefix log-distributions from an exported table.

    Fails loudly on a prefix the export did not cover: a silent fallback
    would turn an export gap into a quietly wrong translation.
    """

    def __init__(self, vocab_size: int, eos: int, table: dict):
        self.vocab_size = vocab_size
        self.eos = eos
        self.table = {tuple(k): np.asarray(v, dtype=np.float64) for k, v in table.items()}

    def score(self, prefix) -> np.ndarray:
        key = tuple(prefix)
        if key not in self.table:
            raise ScorerError(f"replay table has no distribution for prefix {list(key)}")
        return self.table[key]


def load_replay_scorer(path, eos: int) -> ReplayScorer:
    """Read a JSON-lines replay table: each line {"prefix": [ids], "logprobs": [floats]}."""
    path = Path(path)
    table = {}
    vocab_size = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScorerError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if "prefix" not in obj or "logprobs" not in obj:
                raise ScorerError(f"{path}:{lineno}: need keys 'prefix' and 'logprobs'")
            lp = obj["logprobs"]
            if vocab_size is None:
                vocab_size = len(lp)
            elif len(lp) != vocab_size:
                raise ScorerError(
                    f"{path}:{lineno}: {len(lp)} log-probabilities, expected {vocab_size}"
                )
            key = tuple(int(t) for t in obj["prefix"])
            table[key] = assert_log_distribution(lp, vocab_size)
    if vocab_size is None:
        raise ScorerError(f"{path}: empty replay table")
    if not 0 <= eos < vocab_size:
        raise ScorerError(f"eos id {eos} out of range for vocabulary of {vocab_size}")
    return ReplayScorer(vocab_size, eos, table)


def write_replay_table(scorer_table: dict, path) -> None:
    """Write a replay table as JSON-lines, prefixes in sorted order."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for key in sorted(scorer_table):
            obj = {"prefix": list(key), "logprobs": [float(x) for x in scorer_table[key]]}
            fh.write(json.dumps(obj) + "\n")


@dataclass(frozen=True)
class Constraint:
    """Token sequences that must each appear contiguously in the output."""

    sequences: tuple

    def __post_init__(self):
        object.__setattr__(self, "sequences",
                           tuple(tuple(int(t) for t in s) for s in self.sequences))
        for seq in self.sequences:
            if not seq:
                raise ValueError("constraint sequences must be non-empty")
            if any(t < 0 for t in seq):
                raise ValueError("constraint token ids must be non-negative")

    @property
    def total_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)


EMPTY_CONSTRAINT = Constraint(sequences=())


@dataclass(frozen=True)
class ConstraintState:
    """Progress automaton over the constraint sequences.

    ``progress[i]`` is the index of the next needed token of sequence i
    (0 when unstarted or reset); ``satisfied[i]`` is permanent once a
    sequence has been completed.
    """

    constraint: Constraint
    progress: tuple
    satisfied: tuple

    @property
    def met(self) -> int:
        return sum(
            len(seq) if sat else prog
            for seq, prog, sat in zip(self.constraint.sequences, self.progress, self.satisfied)
        )

    @property
    def total(self) -> int:
        return self.constraint.total_tokens

    def needed_tokens(self) -> set:
        """Next token of every open sequence (forced-expansion candidates)."""
        return {
            seq[prog]
            for seq, prog, sat in zip(self.constraint.sequences, self.progress, self.satisfied)
            if not sat
        }


def initial_state(constraint: Constraint) -> ConstraintState:
    n = len(constraint.sequences)
    return ConstraintState(constraint=constraint, progress=(0,) * n, satisfied=(False,) * n)


def advance_state(state: ConstraintState, token: int) -> ConstraintState:
    """Advance every sequence's progress automaton by one emitted token.

    A token extending an in-progress sequence advances it; completing it
    marks it satisfied permanently. A token breaking an in-progress sequence
    resets that sequence's progress to zero and may immediately restart it
    (progress 1) if the token equals its first element. No partial-overlap
    restart beyond the first token is attempted.
    """
    progress = list(state.progress)
    satisfied = list(state.satisfied)
    for i, seq in enumerate(state.constraint.sequences):
        if satisfied[i]:
            continue
        if token == seq[progress[i]]:
            progress[i] += 1
            if progress[i] == len(seq):
                progress[i] = 0
                satisfied[i] = True
        else:
            progress[i] = 1 if token == seq[0] else 0
    return ConstraintState(constraint=state.constraint,
                           progress=tuple(progress), satisfied=tuple(satisfied))


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    logprob: float
    state: ConstraintState
    finished: bool


def _key(hyp) -> tuple:
    # Highest logprob first; ties prefer lower token ids, then shorter output.
    return (-hyp.logprob, hyp.tokens)


def _expand(scorer, hyp: Hypothesis, beam: int):
    """Top-``beam`` scorer expansions of ``hyp`` plus forced constraint tokens."""
    logprobs = np.asarray(scorer.score(list(hyp.tokens)), dtype=np.float64)
    top = np.argsort(-logprobs, kind="stable")[:beam]
    chosen = list(dict.fromkeys(int(t) for t in top))
    for tok in sorted(hyp.state.needed_tokens()):
        if tok not in chosen:
            chosen.append(tok)
    out = []
    for tok in chosen:
        state = advance_state(hyp.state, tok)
        out.append(Hypothesis(
            tokens=hyp.tokens + (tok,),
            logprob=hyp.logprob + float(logprobs[tok]),
            state=state,
            finished=(tok == scorer.eos),
        ))
    return out


def _allocate_banks(candidates, beam: int, total: int):
    """Keep the best of each met-bank; spare capacity flows to higher banks."""
    banks: dict[int, list] = {m: [] for m in range(total + 1)}
    for cand in candidates:
        banks[cand.state.met].append(cand)
    for bank in banks.values():
        bank.sort(key=_key)
    base = beam // (total + 1)
    take = {m: min(len(banks[m]), base) for m in banks}
    unused = beam - sum(take.values())
    for m in sorted(banks, reverse=True):
        extra = min(unused, len(banks[m]) - take[m])
        take[m] += extra
        unused -= extra
    kept = []
    for m in banks:
        kept.extend(banks[m][:take[m]])
    kept.sort(key=_key)
    return kept


def beam_search(scorer: StepScorer, beam: int, max_len: int) -> Hypothesis:
    """Plain (unconstrained) beam search; returns the best finished hypothesis.

    Textbook version, kept independent of :func:`decode` on purpose: the
    constrained decoder with an empty constraint must reproduce this
    function's output exactly, and that check is only meaningful if the two
    do not share a code path. If nothing finishes within ``max_len`` steps
    the best live hypothesis is returned with ``finished=False``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    empty = initial_state(EMPTY_CONSTRAINT)
    live = [Hypothesis(tokens=(), logprob=0.0, state=empty, finished=False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            logprobs = np.asarray(scorer.score(list(hyp.tokens)), dtype=np.float64)
            for tok in np.argsort(-logprobs, kind="stable")[:beam]:
                tok = int(tok)
                candidates.append(Hypothesis(
                    tokens=hyp.tokens + (tok,),
                    logprob=hyp.logprob + float(logprobs[tok]),
                    state=empty,
                    finished=(tok == scorer.eos),
                ))
        finished.extend(c for c in candidates if c.finished)
        live = sorted((c for c in candidates if not c.finished), key=_key)[:beam]
        if not live:
            break
    if finished:
        return min(finished, key=_key)
    if live:
        return min(live, key=_key)
    raise InfeasibleConstraintError("beam search produced no hypothesis")


def decode(scorer: StepScorer, constraint: Constraint, beam: int,
           max_len: int) -> Hypothesis:
    """Constrained beam search with bank-partitioned beam allocation.

    Each step expands every live hypothesis with the scorer's top ``beam``
    tokens plus the next needed token of every open constraint sequence,
    then fills one bank per met-count with an equal share of the beam;
    unused slots go to the banks with the most constraint progress first.
    Returns the highest-scoring finished hypothesis that satisfies every
    constraint; if none finished in time, the best fully-satisfying
    unfinished one (``finished=False``). Raises
    :class:`InfeasibleConstraintError` when neither exists.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    total = constraint.total_tokens
    if max_len < total + 1:
        raise ValueError(
            f"max_len {max_len} cannot fit {total} constraint tokens plus eos"
        )
    for seq in constraint.sequences:
        if any(t >= scorer.vocab_size for t in seq):
            raise ValueError("constraint token id outside the scorer vocabulary")

    live = [Hypothesis(tokens=(), logprob=0.0, state=initial_state(constraint),
                       finished=False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            candidates.extend(_expand(scorer, hyp, beam))
        open_candidates = []
        for cand in candidates:
            if cand.finished:
                if cand.state.met == total:
                    finished.append(cand)
                # an eos with unmet constraints is a dead end: drop it
            else:
                open_candidates.append(cand)
        live = _allocate_banks(open_candidates, beam, total)
        if not live:
            break
    if finished:
        return min(finished, key=_key)
    fallback = [h for h in live if h.state.met == total]
    if fallback:
        return min(fallback, key=_key)
    raise InfeasibleConstraintError(
        f"beam exhausted with no hypothesis satisfying all {total} constraint tokens"
    )


def brute_force_constrained(scorer: StepScorer, constraint: Constraint,
                            max_len: int) -> Hypothesis:
    """Exhaustive argmax over all eos-terminated sequences of length <= max_len.

    Satisfaction is judged with the same progress automaton the decoder
    uses, and log-probabilities accumulate in the same left-to-right order,
    so results are comparable bit for bit. Only viable for tiny vocabularies.
    """
    best: Hypothesis | None = None

    def visit(tokens, logprob, state):
        nonlocal best
        if tokens and tokens[-1] == scorer.eos:
            if state.met == state.total:
                cand = Hypothesis(tokens=tokens, logprob=logprob, state=state, finished=True)
                if best is None or _key(cand) < _key(best):
                    best = cand
            return
        if len(tokens) == max_len:
            return
        logprobs = np.asarray(scorer.score(list(tokens)), dtype=np.float64)
        for tok in range(scorer.vocab_size):
            visit(tokens + (tok,), logprob + float(logprobs[tok]),
                  advance_state(state, tok))

    visit((), 0.0, initial_state(constraint))
    if best is None:
        raise InfeasibleConstraintError(
            f"no sequence of length <= {max_len} satisfies the constraints"
        )
    return best


def contains_contiguously(tokens, sequence) -> bool:
    """Substring scan: does ``sequence`` occur contiguously in ``tokens``?"""
    tokens = list(tokens)
    sequence = list(sequence)
    n, m = len(tokens), len(sequence)
    return any(tokens[i:i + m] == sequence for i in range(n - m + 1))


def load_token_vocab(path) -> dict:
    """Read a token<TAB>id vocabulary file."""
    path = Path(path)
    vocab: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ScorerError(f"{path}:{lineno}: expected token<TAB>id")
            try:
                vocab[parts[0]] = int(parts[1])
            except ValueError as exc:
                raise ScorerError(f"{path}:{lineno}: non-integer id {parts[1]!r}") from exc
    return vocab


def tokenize_constraint(phrase: str, vocab: dict) -> tuple:
    """Map a whitespace-split phrase to token ids; OOV tokens are infeasible."""
    tokens = phrase.split()
    if not tokens:
        raise ValueError("empty constraint phrase")
    ids = []
    for tok in tokens:
        if tok not in vocab:
            raise InfeasibleConstraintError(f"constraint token {tok!r} not in vocabulary")
        ids.append(vocab[tok])
    return tuple(ids)


def verb_constraint(verb: str, vocab: dict) -> Constraint:
    """Single-sequence constraint from a (possibly subword-split) verb."""
    return Constraint(sequences=(tokenize_constraint(verb, vocab),))
