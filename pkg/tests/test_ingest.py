import io
import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayeslfm.errors import EmptyDatasetError, ParseError
from bayeslfm.ingest import (
    Interaction, dataset_stats, from_arrays, parse_movielens, read_canonical, write_canonical,
)


def test_single_line():
    ds = parse_movielens("1::1193::5::978300760\n")
    assert (ds.m, ds.n) == (1, 1)
    assert ds.interactions == [Interaction(0, 0, 5.0, 978300760)]
    assert ds.r_mean == 5.0


def test_first_appearance_ids_and_file_order():
    ds = parse_movielens("9::7::4::3\n2::7::3::1\n9::5::5::2\n")
    assert ds.user_ids.tolist() == [9, 2]
    assert ds.item_ids.tolist() == [7, 5]
    assert ds.users.tolist() == [0, 1, 0]
    assert ds.items.tolist() == [0, 0, 1]
    assert ds.timestamps.tolist() == [3, 1, 2]
    assert ds.user_index == {9: 0, 2: 1}


def test_crlf_blank_lines_and_half_stars():
    ds = parse_movielens("1::2::3.5::10\r\n\r\n1::3::0.5::11\r\n")
    assert ds.ratings.tolist() == [3.5, 0.5]
    assert ds.r_min == 0.5 and ds.r_max == 3.5


@pytest.mark.parametrize("text, lineno", [
    ("1::2::3::4\n1::2::3\n", 2),
    ("1::2::3::4\n\n1::x::3::4\n", 3),
    ("1::2::three::4\n", 1),
    ("1::2::3::4::5\n", 1),
    ("1,2,3,4\n", 1),
])
def test_parse_errors_carry_line_number(text, lineno):
    with pytest.raises(ParseError) as err:
        parse_movielens(text)
    assert err.value.line_number == lineno
    assert f"line {lineno}" in str(err.value)


def test_empty_input():
    with pytest.raises(EmptyDatasetError, match="empty dataset"):
        parse_movielens("")
    with pytest.raises(EmptyDatasetError):
        parse_movielens("\n\n")


class TestStats:
    def test_two_points_population_variance(self):
        s = dataset_stats(from_arrays([0, 0], [0, 1], [2.0, 4.0]))
        assert s.r_mean == 3.0
        assert s.r_var == 1.0

    def test_complete_matrix_has_zero_sparsity(self):
        u, i = np.meshgrid(np.arange(3), np.arange(4), indexing="ij")
        s = dataset_stats(from_arrays(u.ravel(), i.ravel(), np.ones(12)))
        assert s.sparsity == 0.0

    def test_sparsity_definition(self, ml_text):
        ds = parse_movielens(ml_text)
        s = dataset_stats(ds)
        assert s.sparsity == 1 - s.count / (s.m * s.n)
        assert (s.r_min, s.r_max) == (float(ds.ratings.min()), float(ds.ratings.max()))

    def test_empty_dataset_rejected(self):
        with pytest.raises(EmptyDatasetError):
            dataset_stats(from_arrays([], [], [], m=1, n=1))

    def test_second_pass_bit_for_bit(self, ml_text):
        """Mean/variance recomputed in a shuffled pure-Python pass agree exactly."""
        ds = parse_movielens(ml_text)
        values = [float(x) for x in ds.ratings]
        random.Random(3).shuffle(values)
        mean = math.fsum(values) / len(values)
        var = math.fsum((v - mean) ** 2 for v in values) / len(values)
        assert ds.r_mean == mean
        assert ds.r_var == var
        exact = Fraction(sum(Fraction(v) for v in values), len(values))
        assert abs(Fraction(ds.r_mean) - exact) <= Fraction(1, 2**50)


def test_dense_index_compaction(ml_text):
    ds = parse_movielens(ml_text)
    assert ds.users.max() == ds.m - 1 and ds.items.max() == ds.n - 1
    assert set(ds.users.tolist()) == set(range(ds.m))
    assert set(ds.items.tolist()) == set(range(ds.n))
    assert len(ds.user_index) == ds.m and len(ds.item_index) == ds.n


def _roundtrip(ds):
    buf = io.StringIO()
    write_canonical(ds, buf)
    buf.seek(0)
    return read_canonical(buf)


def test_canonical_roundtrip(ml_text):
    ds = parse_movielens(ml_text)
    back = _roundtrip(ds)
    assert back.interactions == ds.interactions
    assert back.user_ids.tolist() == ds.user_ids.tolist()
    assert back.item_ids.tolist() == ds.item_ids.tolist()
    assert dataset_stats(back) == dataset_stats(ds)


def test_canonical_with_foreign_index(ml_text):
    ds = parse_movielens(ml_text)
    sub = ds.subset(np.arange(len(ds))[::3])
    buf = io.StringIO()
    write_canonical(sub, buf)
    buf.seek(0)
    back = read_canonical(buf, index_from=ds)
    assert back.interactions == sub.interactions
    assert back.m == ds.m and back.n == ds.n


records = st.lists(
    st.tuples(st.integers(1, 50), st.integers(1, 50),
              st.sampled_from([0.5 * k for k in range(11)]), st.integers(0, 2**40)),
    min_size=1, max_size=60,
)


@settings(max_examples=60, deadline=None)
@given(records)
def test_roundtrip_property(rows):
    text = "".join(f"{u}::{i}::{r}::{t}\n" for u, i, r, t in rows)
    ds = parse_movielens(text)
    back = _roundtrip(ds)
    assert back.interactions == ds.interactions
    assert dataset_stats(back) == dataset_stats(ds)
    assert ds.users.max() == ds.m - 1 and ds.items.max() == ds.n - 1


def test_ml1m_reference_counts(ml1m):
    s = dataset_stats(ml1m)
    assert (s.count, s.m, s.n) == (1_000_209, 6_040, 3_706)
    assert round(100 * s.sparsity, 2) == 95.53
    assert round(s.r_mean, 2) == 3.58
    assert abs(s.r_var - 1.24) < 0.01
