import numpy as np
import pytest

from mvgpt.baseline import (
    BinTable,
    DiscreteCodec,
    bin_decode,
    bin_encode,
    fit_class_bins,
    fit_from_records,
    fit_quantile_bins,
)
from mvgpt.errors import DataError
from mvgpt.schema import EventRecord, build_vocabulary
from mvgpt.tokenizer import encode_records


def _linear_quantile(sorted_vals, q):
    # type-7 sample quantile written out by hand
    h = (len(sorted_vals) - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (h - lo) * (sorted_vals[hi] - sorted_vals[lo])


@pytest.mark.parametrize("n", [1, 2, 3, 7, 10, 33, 100])
def test_edges_match_hand_quantiles(n):
    vals = np.random.default_rng(n).normal(size=500)
    bins = fit_class_bins(vals, n)
    s = sorted(vals.tolist())
    expected = [_linear_quantile(s, k / n) for k in range(n + 1)]
    np.testing.assert_allclose(bins.edges, expected, rtol=0, atol=1e-12)
    assert bins.n_bins == n


def test_encode_matches_linear_scan():
    vals = np.random.default_rng(0).exponential(size=300)
    bins = fit_class_bins(vals, 12)
    table = BinTable({"x": bins})
    probes = np.concatenate([vals[:50], bins.edges, [-1.0, 1e9]])
    for v in probes:
        scan = 0
        for i in range(bins.n_bins):
            if v >= bins.edges[i]:
                scan = i
        assert bin_encode(v, "x", table) == scan


def test_representative_is_in_bin_median():
    vals = np.arange(100, dtype=float)
    bins = fit_class_bins(vals, 4)
    table = BinTable({"x": bins})
    for i in range(4):
        members = [v for v in vals if bin_encode(v, "x", table) == i]
        assert bin_decode(i, "x", table) == np.median(members)
        assert bins.edges[i] <= bin_decode(i, "x", table) <= bins.edges[i + 1]


def test_repeated_edges_collapse():
    vals = [0.0] * 80 + list(np.linspace(1, 2, 20))
    bins = fit_class_bins(vals, 10)
    assert bins.collapsed > 0
    assert np.all(np.diff(bins.edges) > 0)


def test_too_few_distinct_values():
    with pytest.raises(DataError, match="distinct"):
        fit_class_bins([1.0, 2.0], 3)
    with pytest.raises(DataError):
        bin_decode(5, "x", fit_quantile_bins({"x": [1.0, 2.0, 3.0]}, 2))


def test_equal_mass_small():
    vals = np.random.default_rng(1).uniform(size=10_000)
    bins = fit_class_bins(vals, 10)
    counts = np.bincount([bin_encode(v, "x", BinTable({"x": bins})) for v in vals], minlength=10)
    assert np.all(np.abs(counts - 1000) <= 20)


def test_table_roundtrip(tmp_path):
    table = fit_quantile_bins({"a": np.arange(10.0), "b": np.arange(5.0) ** 2}, 3)
    again = BinTable.from_dict(table.to_dict())
    for name in ("a", "b"):
        np.testing.assert_array_equal(again[name].edges, table[name].edges)
    table.write_csv(tmp_path / "bins.csv")
    lines = (tmp_path / "bins.csv").read_text().splitlines()
    assert lines[0] == "class,bin,lo,hi,representative"
    assert len(lines) == 1 + 6


def test_codec_roundtrip_on_mixed_data():
    recs = [EventRecord("s", float(t), "x", float(v)) for t, v in enumerate(np.linspace(-1, 1, 40))]
    recs += [EventRecord("s", float(t), "flag", "on" if t % 3 else "off") for t in range(0, 40, 5)]
    vocab = build_vocabulary(recs)
    table = fit_from_records(recs, vocab, 8)
    assert table["time"].n_bins == 1  # evenly spaced times
    codec = DiscreteCodec(vocab, table)
    assert codec.d_c == 8 + 2 + 1
    assert not any(codec.numeric_mask)
    seq = encode_records(recs, vocab)[0]
    enc = codec.encode(seq)
    assert all(t.value is None for t in enc.tokens)
    dec = codec.decode(enc)
    assert dec.class_ids == seq.class_ids
    x = vocab.by_name("x")
    for a, b in zip(seq.tokens, dec.tokens):
        if a.class_id == x.class_id:
            lo, hi = codec.interval(codec.encode_token(a).class_id)
            assert lo <= x.norm.inverse(b.value) <= hi
            assert lo <= x.norm.inverse(a.value) <= hi + 1e-12
