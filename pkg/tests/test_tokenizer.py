import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nextpoint.scene import Point
from nextpoint.tokenizer import (
    FormatError,
    TokenSequence,
    Vocabulary,
    dequantize,
    encode_points,
    encoded_length,
    parse_sequence,
    quantize,
    raster_order,
    raster_sort,
    structural_mask,
)


def brute_quantize(u, K):
    d = [abs(u - (i + 0.5) / K) for i in range(K)]
    return d.index(min(d))  # first minimum = lower index


def test_vocabulary_layout():
    v = Vocabulary(K=8, L=3)
    assert (v.LBRACK, v.SEP, v.RBRACK, v.BOS, v.EOS) == (8, 9, 10, 11, 12)
    assert v.latent_ids == [13, 14, 15]
    assert v.size == 16
    assert len(set(range(v.size))) == v.size
    assert v.layout_hash() != Vocabulary(K=8, L=2).layout_hash()


def test_vocabulary_rejects_bad_sizes():
    with pytest.raises(ValueError):
        Vocabulary(K=1, L=0)
    with pytest.raises(ValueError):
        Vocabulary(K=4, L=-1)


@pytest.mark.parametrize("u,K,want", [(0.0, 32, 0), (0.33, 10, 3), (0.5, 10, 4), (1.0, 10, 9)])
def test_quantize_examples(u, K, want):
    assert quantize(u, K) == want


def test_quantize_domain_error():
    with pytest.raises(ValueError):
        quantize(1.0001, 10)
    with pytest.raises(ValueError):
        quantize(-0.1, 10)


def test_dequantize_examples():
    assert dequantize(0, 10) == pytest.approx(0.05)
    assert dequantize(9, 10) == pytest.approx(0.95)
    with pytest.raises(ValueError):
        dequantize(10, 10)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.integers(2, 300))
def test_quantize_matches_exhaustive_argmin(u, K):
    assert quantize(u, K) == brute_quantize(u, K)
    assert abs(dequantize(quantize(u, K), K) - u) <= 1 / (2 * K) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(2, 100))
def test_quantize_monotone(a, b, K):
    lo, hi = min(a, b), max(a, b)
    assert quantize(lo, K) <= quantize(hi, K)


def test_encode_empty_and_single():
    v = Vocabulary(32, 0)
    assert encode_points([], 256, 256, 32).ids == [v.BOS, v.EOS]
    assert encode_points([Point(0, 0)], 256, 256, 32).ids == [v.BOS, v.LBRACK, 0, v.SEP, 0, v.RBRACK, v.EOS]


def test_raster_order_uses_quantized_bins():
    # same y bin, x bins 5 then 3 -> the bin-3 point comes first
    pts = [Point(5.5, 2.2), Point(3.5, 2.7)]
    ids = encode_points(pts, 64, 64, 64).ids
    assert ids[2] == 3


def test_raster_sort_examples():
    pts = [Point(1, 1), Point(20, 1), Point(5, 30)]
    assert raster_sort(pts, 64, 64, 64) == pts
    assert raster_order(pts[::-1], 64, 64, 64) == [2, 1, 0]
    # two points in one cell keep their input order
    same = [Point(10.2, 10.2), Point(10.6, 10.4)]
    assert raster_order(same, 64, 64, 16) == [0, 1]
    assert raster_order(same[::-1], 64, 64, 16) == [0, 1]


points_st = st.lists(st.tuples(st.floats(0, 63.999), st.floats(0, 63.999)), max_size=12)


@settings(max_examples=150, deadline=None)
@given(points_st, st.integers(0, 3))
def test_parse_inverts_encode(raw, L):
    K, W = 16, 64
    pts = [Point(x, y) for x, y in raw]
    seq = encode_points(pts, W, W, K, L)
    assert len(seq) == encoded_length(len(pts), L)
    parsed = parse_sequence(seq, W, W, K, L)
    want = [Point(dequantize(quantize(p.x / W, K), K) * W, dequantize(quantize(p.y / W, K), K) * W) for p in raster_sort(pts, W, W, K)]
    assert parsed.points == want
    spans = parsed.token_spans
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))


def test_missing_y_token_reported_at_index_4():
    v = Vocabulary(16, 0)
    with pytest.raises(FormatError) as exc:
        parse_sequence([v.BOS, v.LBRACK, 3, v.SEP, v.RBRACK, v.EOS], 64, 64, 16)
    assert exc.value.index == 4 and exc.value.kind == "missing y token"


def test_eight_pairs_decode_to_bin_centers():
    rng = np.random.default_rng(0)
    v = Vocabulary(16, 0)
    bins = rng.integers(0, 16, (8, 2))
    ids = [v.BOS]
    for n, (bx, by) in enumerate(bins):
        if n:
            ids.append(v.SEP)
        ids += [v.LBRACK, int(bx), v.SEP, int(by), v.RBRACK]
    ids.append(v.EOS)
    pts = parse_sequence(ids, 64, 64, 16).points
    assert pts == [Point((bx + 0.5) / 16 * 64, (by + 0.5) / 16 * 64) for bx, by in bins]


@pytest.mark.parametrize(
    "tail,kind",
    [
        (["L", 1, "S", 2, "R", "S", "E"], "trailing separator"),
        (["L", 1, "S", 2, "R"], "missing EOS"),
        (["L", 1, 2, "S", 3, "R", "E"], "extra axis token"),
        (["L", 1, "S", 2, 3, "R", "E"], "extra axis token"),
        (["L", 1, "S", "B", "R", "E"], "missing y token"),
        ([1, "S", 2, "R", "E"], "expected LBRACK or EOS"),
        (["L", 1, "S", 2, "E"], "missing RBRACK"),
        (["E", "E"], "token after EOS"),
    ],
)
def test_malformed_sequences(tail, kind):
    v = Vocabulary(16, 0)
    sym = {"L": v.LBRACK, "S": v.SEP, "R": v.RBRACK, "E": v.EOS, "B": v.BOS}
    ids = [v.BOS] + [sym.get(t, t) for t in tail]
    with pytest.raises(FormatError) as exc:
        parse_sequence(ids, 64, 64, 16)
    assert exc.value.kind == kind


def test_latents_must_follow_bos():
    v = Vocabulary(16, 2)
    good = [v.BOS, *v.latent_ids, v.EOS]
    assert parse_sequence(good, 64, 64, 16, 2).points == []
    bad = [v.BOS, v.LBRACK, 1, v.SEP, 2, v.RBRACK, v.latent_ids[0], v.EOS]
    with pytest.raises(FormatError):
        parse_sequence(bad, 64, 64, 16, 2)


def test_token_sequence_validates_logprobs():
    with pytest.raises(ValueError):
        TokenSequence([1, 2], [0.0])
    with pytest.raises(ValueError):
        TokenSequence([1, 2], [0.0, float("nan")])


def test_structural_mask():
    assert structural_mask([0, 15, 16, 20], 16).tolist() == [True, True, False, False]
