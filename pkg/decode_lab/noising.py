"""Corruption schemes applied to encoder-input histories during pretraining.

Every function is pure given its `rng`: callers that build examples in
parallel derive one generator per example.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Set

import numpy as np

from decode_lab.corpus import (
    FIRST_CODE_ID,
    MASK,
    PAD,
    PREFIX_LEN,
    SEP,
    TokenSequence,
    Vocabulary,
    flatten_history,
    target_visit,
)
from decode_lab.errors import InvariantError, UsageError
from decode_lab.schemas import NoiseParams, PatientRecord, Scheme

logger = logging.getLogger("decode_lab.noising")


@dataclass(frozen=True)
class NoisedExample:
    corrupted: TokenSequence
    target: List[int]
    scheme: Scheme


@dataclass(frozen=True)
class MaskedExample:
    """Encoder-only masked-code example: positions to predict and their original ids."""

    corrupted: TokenSequence
    positions: List[int]
    original_ids: List[int]


def _check_rate(name: str, value: float):
    if not 0.0 <= value <= 1.0:
        raise UsageError(f"{name} must lie in [0, 1], got {value}")


def code_positions(seq: TokenSequence) -> List[int]:
    return [i for i in range(PREFIX_LEN, len(seq)) if seq.token_ids[i] not in (SEP, PAD)]


def _corrupt(token: int, rng: np.random.Generator, random_replace: bool, vocab_size: Optional[int]) -> int:
    if not random_replace:
        return MASK
    # 80% [MASK], 10% random code, 10% unchanged
    u = rng.random()
    if u < 0.8 or vocab_size is None or vocab_size <= FIRST_CODE_ID:
        return MASK
    if u < 0.9:
        return int(rng.integers(FIRST_CODE_ID, vocab_size))
    return token


def code_mask(
    seq: TokenSequence,
    rate: float,
    rng: np.random.Generator,
    random_replace: bool = False,
    vocab_size: Optional[int] = None,
) -> TokenSequence:
    _check_rate("rate", rate)
    tokens = list(seq.token_ids)
    for i in code_positions(seq):
        if rng.random() < rate:
            tokens[i] = _corrupt(tokens[i], rng, random_replace, vocab_size)
    return TokenSequence(tuple(tokens), seq.visit_index)


def span_positions(seq: TokenSequence, rate: float, mean_span: float, rng: np.random.Generator) -> Set[int]:
    """Code positions covered by Poisson-length spans until the drawn coverage is reached.

    The number of tokens to cover is Binomial(n_codes, rate). A span skips over
    [SEP] (so it continues as a separate run in the next visit) and stops at a
    position that is already covered.
    """
    _check_rate("rate", rate)
    if mean_span < 1.0:
        raise UsageError(f"mean_span must be at least 1, got {mean_span}")
    positions = code_positions(seq)
    n_target = int(rng.binomial(len(positions), rate)) if positions else 0
    covered: Set[int] = set()
    rank = {position: r for r, position in enumerate(positions)}
    while len(covered) < n_target:
        free = [p for p in positions if p not in covered]
        start = free[int(rng.integers(len(free)))]
        length = max(1, int(rng.poisson(mean_span)))
        r = rank[start]
        while length > 0 and r < len(positions) and positions[r] not in covered and len(covered) < n_target:
            covered.add(positions[r])
            length -= 1
            r += 1
    return covered


def span_mask(seq: TokenSequence, rate: float, mean_span: float, rng: np.random.Generator) -> TokenSequence:
    covered = span_positions(seq, rate, mean_span, rng)
    tokens, visits = [], []
    for i, (token, visit) in enumerate(zip(seq.token_ids, seq.visit_index)):
        if i in covered:
            # a covered run collapses into the [MASK] emitted at its first position
            if i - 1 in covered and seq.visit_index[i - 1] == visit:
                continue
            token = MASK
        tokens.append(token)
        visits.append(visit)
    return TokenSequence(tuple(tokens), tuple(visits))


def _segments(seq: TokenSequence) -> List[List[int]]:
    """Positions of each visit segment, trailing [SEP] included."""
    segments, current = [], []
    for i in range(PREFIX_LEN, len(seq)):
        if seq.token_ids[i] == PAD:
            break
        current.append(i)
        if seq.token_ids[i] == SEP:
            segments.append(current)
            current = []
    if current:
        segments.append(current)
    return segments


def visit_mask(seq: TokenSequence, visit_rate: float, rng: np.random.Generator) -> TokenSequence:
    _check_rate("visit_rate", visit_rate)
    segments = _segments(seq)
    if not segments:
        return seq
    selected = rng.random(len(segments)) < visit_rate
    if selected.all():
        selected[-1] = False
    tokens = list(seq.token_ids)
    for segment, chosen in zip(segments, selected):
        if chosen:
            for i in segment:
                if tokens[i] != SEP:
                    tokens[i] = MASK
    return TokenSequence(tuple(tokens), seq.visit_index)


def visit_permute(seq: TokenSequence, rng: np.random.Generator) -> TokenSequence:
    segments = _segments(seq)
    if len(segments) < 2:
        return seq
    order = rng.permutation(len(segments))
    tokens = list(seq.token_ids[:PREFIX_LEN])
    visits = list(seq.visit_index[:PREFIX_LEN])
    for number, s in enumerate(order, start=1):
        tokens.extend(seq.token_ids[i] for i in segments[s])
        visits.extend([number] * len(segments[s]))
    tail = PREFIX_LEN + sum(len(segment) for segment in segments)
    tokens.extend(seq.token_ids[tail:])
    visits.extend(seq.visit_index[tail:])
    return TokenSequence(tuple(tokens), tuple(visits))


def apply_scheme(seq: TokenSequence, params: NoiseParams, rng: np.random.Generator, vocab_size: Optional[int] = None):
    scheme = Scheme(params.scheme)
    if scheme == Scheme.CODE:
        return code_mask(seq, params.mask_rate, rng, params.random_replace, vocab_size)
    if scheme == Scheme.SPAN:
        return span_mask(seq, params.mask_rate, params.mean_span, rng)
    if scheme == Scheme.VISIT:
        return visit_mask(seq, params.visit_rate, rng)
    if scheme == Scheme.PERMUTE:
        return visit_permute(seq, rng)
    return seq


def _check_no_leak(corrupted: TokenSequence, visit_idx: int):
    n_visits = sum(token == SEP for token in corrupted.token_ids)
    if n_visits > visit_idx:
        raise InvariantError(f"encoder input holds {n_visits} visits but only {visit_idx} precede the target")


def make_pretrain_example(
    record: PatientRecord,
    visit_idx: int,
    scheme: Scheme,
    params: NoiseParams,
    vocab: Vocabulary,
    rng: np.random.Generator,
    max_seq_len: int = 256,
) -> NoisedExample:
    if not 1 <= visit_idx < len(record.visits):
        raise UsageError(f"visit_idx {visit_idx} outside 1..{len(record.visits) - 1}")
    scheme = Scheme(scheme)
    history = flatten_history(record, visit_idx, vocab, max_seq_len)
    corrupted = apply_scheme(history, params.model_copy(update={"scheme": scheme}), rng, len(vocab))
    _check_no_leak(corrupted, visit_idx)
    return NoisedExample(corrupted, target_visit(record, visit_idx, vocab), scheme)


def make_mlm_example(
    record: PatientRecord,
    visit_idx: int,
    rate: float,
    vocab: Vocabulary,
    rng: np.random.Generator,
    random_replace: bool = False,
    max_seq_len: int = 256,
) -> MaskedExample:
    """Masks codes of the history before `visit_idx`; at least one position is always masked."""
    if not 1 <= visit_idx < len(record.visits):
        raise UsageError(f"visit_idx {visit_idx} outside 1..{len(record.visits) - 1}")
    _check_rate("rate", rate)
    history = flatten_history(record, visit_idx, vocab, max_seq_len)
    candidates = code_positions(history)
    positions = [p for p in candidates if rng.random() < rate]
    if not positions:
        positions = [candidates[int(rng.integers(len(candidates)))]]
    tokens = list(history.token_ids)
    for p in positions:
        tokens[p] = _corrupt(tokens[p], rng, random_replace, len(vocab))
    corrupted = TokenSequence(tuple(tokens), history.visit_index)
    _check_no_leak(corrupted, visit_idx)
    return MaskedExample(corrupted, positions, [history.token_ids[p] for p in positions])


def scheme_names() -> Sequence[str]:
    return [scheme.value for scheme in Scheme]
