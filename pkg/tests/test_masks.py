import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskmatch.errors import DimensionMismatch, MalformedRle
from maskmatch.masks import BinaryMask, RleMask, clip_union, rle_decode, rle_encode

mask_arrays = arrays(
    dtype=bool,
    shape=st.tuples(st.integers(1, 64), st.integers(1, 64)),
)


@given(mask_arrays)
def test_rle_roundtrip_is_exact(bits):
    mask = BinaryMask(bits)
    again = rle_decode(rle_encode(mask))
    assert again == mask
    assert again.bits.tobytes() == mask.bits.tobytes()


@given(mask_arrays)
def test_rle_encoding_is_canonical(bits):
    rle = rle_encode(BinaryMask(bits))
    # column-major, starts with the zero run, no interior zero runs
    assert rle.counts[0] == 0 or not bits.ravel(order="F")[0]
    assert all(c > 0 for c in rle.counts[1:])
    assert sum(rle.counts) == bits.size
    # re-encoding the decoded mask reproduces the counts exactly
    assert rle_encode(rle_decode(rle)).counts == rle.counts


def test_rle_known_values():
    empty = BinaryMask.zeros(2, 2)
    assert rle_encode(empty).counts == (4,)
    full = BinaryMask.ones(2, 2)
    assert rle_encode(full).counts == (0, 4)
    # column-major: pixel (1, 0) is the second flat element
    one = np.zeros((2, 2), dtype=bool)
    one[1, 0] = True
    assert rle_encode(BinaryMask(one)).counts == (1, 1, 2)


@pytest.mark.parametrize(
    "counts, fragment",
    [
        ((-1, 5), "negative"),
        ((1, 0, 0, 3), "adjacent zero"),
        ((0, 0, 4), "adjacent zero"),
        ((3,), "sum to 3"),
        ((2, 2, 2), "sum to 6"),
        ((), "sum to 0"),
    ],
)
def test_malformed_rle_is_rejected_with_reason(counts, fragment):
    with pytest.raises(MalformedRle, match=fragment):
        RleMask(size=(2, 2), counts=counts)


def test_rle_rejects_degenerate_size():
    with pytest.raises(MalformedRle, match="size"):
        RleMask(size=(0, 4), counts=(0,))


def test_binary_mask_is_immutable():
    mask = BinaryMask.zeros(3, 3)
    with pytest.raises(ValueError):
        mask.bits[0, 0] = True


def test_binary_mask_equality_and_hash():
    a = BinaryMask(np.eye(3, dtype=bool))
    b = BinaryMask(np.eye(3, dtype=bool))
    assert a == b and hash(a) == hash(b)
    assert a != BinaryMask.zeros(3, 3)
    assert a != BinaryMask(np.eye(4, dtype=bool))


@given(mask_arrays, mask_arrays)
def test_clip_union_matches_logical_or(a_bits, b_bits):
    if a_bits.shape != b_bits.shape:
        b_bits = np.zeros_like(a_bits)
    a, b = BinaryMask(a_bits), BinaryMask(b_bits)
    got = clip_union([a, b], [0, 1])
    assert np.array_equal(got.bits, a_bits | b_bits)
    # idempotent under repeated selection
    assert clip_union([a, b], [0, 0, 1, 1]) == got


def test_clip_union_empty_selection_needs_dims_only_without_proposals():
    assert clip_union([], [], dims=(2, 3)) == BinaryMask.zeros(2, 3)
    assert clip_union([BinaryMask.ones(2, 2)], []) == BinaryMask.zeros(2, 2)
    with pytest.raises(DimensionMismatch):
        clip_union([], [])


def test_clip_union_rejects_bad_indices_and_shapes():
    masks = [BinaryMask.zeros(2, 2), BinaryMask.ones(3, 3)]
    with pytest.raises(DimensionMismatch):
        clip_union(masks, [0, 1])
    with pytest.raises(IndexError):
        clip_union(masks[:1], [1])
