import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trinitydna.genome_io import ParseError, reverse_complement
from trinitydna.numerics import ContractError, RandomSource
from trinitydna.tokenizer import (
    KEEP, MASK, MASK_REPLACE, PAD, RANDOM_REPLACE, TokenSequence, apply_masking_plan,
    build_masking_plan, decode, encode, plan_targets, reconstruct, reverse_complement_ids,
)


def test_encode_examples():
    np.testing.assert_array_equal(encode("ACGTN").ids, [0, 1, 2, 3, 4])
    seq = encode("ACGT", pad_len=2)
    np.testing.assert_array_equal(seq.ids, [0, 1, PAD, PAD])
    np.testing.assert_array_equal(seq.pad_mask, [False, False, True, True])
    with pytest.raises(ParseError):
        encode("ACXT")


def test_token_sequence_rejects_interior_pad():
    with pytest.raises(ContractError):
        TokenSequence(np.array([0, PAD, 1]), pad_len=0)
    with pytest.raises(ContractError):
        TokenSequence(np.array([0, 7]))


@given(st.text(alphabet="ACGTN", max_size=100))
def test_encode_decode_and_rc_commute(s):
    assert decode(encode(s)) == s
    assert decode(reverse_complement_ids(encode(s).ids)) == reverse_complement(s)


def test_rc_ids_batched_last_axis():
    ids = np.array([[0, 1, 2], [3, 4, MASK]])
    np.testing.assert_array_equal(reverse_complement_ids(ids), [[1, 2, 3], [MASK, 4, 0]])


@settings(max_examples=40, deadline=None)
@given(st.text(alphabet="ACGTN", min_size=1, max_size=80), st.integers(0, 10), st.integers(0, 2**31))
def test_masking_round_trip_and_pad_untouched(s, pad, seed):
    seq = encode(s + "N" * pad, pad_len=pad)
    plan = build_masking_plan(seq, RandomSource(seed))
    corrupted = apply_masking_plan(seq, plan)
    np.testing.assert_array_equal(reconstruct(corrupted, plan).ids, seq.ids)
    assert np.all(corrupted.ids[seq.pad_mask] == PAD)
    assert np.all(plan.index < len(s))
    assert np.all(corrupted.ids[plan.index[plan.action == MASK_REPLACE]] == MASK)
    rnd = plan.replacement[plan.action == RANDOM_REPLACE]
    assert np.all((rnd >= 0) & (rnd <= 3))
    assert np.all(plan.replacement[plan.action == KEEP] == plan.original[plan.action == KEEP])
    targets, selected = plan_targets(plan, len(seq))
    assert selected.sum() == len(plan)


def test_masking_all_pad_raises():
    with pytest.raises(ContractError):
        build_masking_plan(TokenSequence(np.array([PAD, PAD]), pad_len=2), RandomSource(0))


def test_masking_out_of_range_plan_raises():
    seq = encode("ACGT")
    plan = build_masking_plan(encode("ACGTACGTACGTACGTACGT"), RandomSource(3))
    if len(plan) == 0 or plan.index.max() < 4:
        plan.index = np.array([10])
        plan.replacement = np.array([MASK])
        plan.original = np.array([0])
        plan.action = np.array([MASK_REPLACE])
    with pytest.raises(ContractError):
        apply_masking_plan(seq, plan)


def test_masking_seeded_determinism():
    seq = encode("ACGT" * 50)
    a = build_masking_plan(seq, RandomSource(9))
    b = build_masking_plan(seq, RandomSource(9))
    np.testing.assert_array_equal(a.index, b.index)
    np.testing.assert_array_equal(a.replacement, b.replacement)
