import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cycleskip.dataset import CSV_HEADER, CohortFilter, Dataset, apply_filter, ingest, read_ages, read_csv, write_csv
from cycleskip.errors import DataError, DomainError
from cycleskip.model import CycleHistory

HEADER = ",".join(CSV_HEADER) + "\n"


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_round_trip_with_and_without_skips(tmp_path):
    data = Dataset([CycleHistory("a", (30, 31, 60), (0, 0, 1)), CycleHistory("b,quoted", (28,), (0,))])
    write_csv(data, tmp_path / "x.csv")
    back = read_csv(tmp_path / "x.csv")
    assert back.histories == data.histories
    plain = Dataset([CycleHistory("c", (29, 27))])
    write_csv(plain, tmp_path / "y.csv")
    assert (tmp_path / "y.csv").read_text() == HEADER + "c,0,29,\nc,1,27,\n"
    assert read_csv(tmp_path / "y.csv").histories[0].true_skips is None


@given(st.lists(st.lists(st.integers(1, 400), min_size=1, max_size=12), min_size=1, max_size=8))
@settings(max_examples=50, deadline=None)
def test_round_trip_property(tmp_path_factory, all_cycles):
    data = Dataset([CycleHistory(f"u{i}", tuple(c)) for i, c in enumerate(all_cycles)])
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(data, path)
    assert read_csv(path).histories == data.histories


def test_empty_file_warns_and_returns_empty(tmp_path):
    with pytest.warns(UserWarning, match="empty"):
        data = read_csv(write(tmp_path, ""))
    assert len(data) == 0


def test_bad_header(tmp_path):
    with pytest.raises(DataError, match="line 1"):
        read_csv(write(tmp_path, "user,idx,len\n"))


@pytest.mark.parametrize(
    "body, line, what",
    [
        ("a,0,30,\na,1,x,\n", 3, "non-integer"),
        ("a,0,30\n", 2, "4 fields"),
        ("a,0,30,\na,2,31,\n", 3, "expected 1"),
        ("a,0,0,\n", 2, ">= 1"),
        ("a,0,30,-1\n", 2, "true_skips"),
    ],
)
def test_malformed_rows_report_line(tmp_path, body, line, what):
    with pytest.raises(DataError, match=f"line {line}.*{what}|{what}.*line {line}") as info:
        read_csv(write(tmp_path, HEADER + body))
    assert f"line {line}" in str(info.value)


def test_partial_true_skips_rejected(tmp_path):
    with pytest.raises(DataError, match="some cycles only"):
        read_csv(write(tmp_path, HEADER + "a,0,30,0\na,1,31,\n"))


def test_first_k_cycles_truncates(tmp_path):
    body = "".join(f"a,{i},{28 + i},\n" for i in range(12))
    data, report = ingest(write(tmp_path, HEADER + body), CohortFilter(first_k_cycles=11))
    assert len(data.histories[0]) == 11
    assert report.cycles_truncated == 1


def test_min_cycles_drops_two_cycle_user(tmp_path):
    body = "a,0,30,\na,1,31,\nb,0,28,\nb,1,29,\nb,2,30,\n"
    data, report = ingest(write(tmp_path, HEADER + body), CohortFilter(min_cycles=3))
    assert [h.user_id for h in data] == ["b"]
    assert report.removed_by_min_cycles == 1


def test_gap_filter_drops_long_cycles():
    data = Dataset([CycleHistory("a", (30, 95, 29)), CycleHistory("b", (120,))])
    out, report = apply_filter(data, CohortFilter(max_gap_days=90))
    assert out.histories[0].cycles == (30, 29)
    assert report.cycles_removed_by_gap == 2
    assert report.removed_by_gap == 1


def test_age_filter(tmp_path):
    ages = write(tmp_path, "user_id,age\na,25\nb,40\n", "ages.csv")
    data = Dataset([CycleHistory("a", (30,)), CycleHistory("b", (30,)), CycleHistory("c", (30,))])
    out, report = apply_filter(data, CohortFilter(age_range=(21, 33)), read_ages(ages))
    assert [h.user_id for h in out] == ["a"]
    assert report.removed_by_age == 2


def test_age_filter_requires_ages():
    with pytest.raises(DataError):
        apply_filter(Dataset([CycleHistory("a", (30,))]), CohortFilter(age_range=(21, 33)))


def test_filter_order_age_min_gap_truncate():
    ages = {"a": 25.0, "b": 25.0, "c": 50.0}
    data = Dataset(
        [
            CycleHistory("a", (30, 31, 100, 29, 28)),
            CycleHistory("b", (100, 100, 30)),
            CycleHistory("c", (30, 30, 30)),
        ]
    )
    out, report = apply_filter(data, CohortFilter(min_cycles=3, max_gap_days=90, first_k_cycles=3, age_range=(21, 33)), ages)
    # gap exclusion runs after the min-cycles check, truncation last
    assert [h.cycles for h in out] == [(30, 31, 29), (30,)]
    assert report.removed_by_age == 1
    assert report.cycles_truncated == 1


def test_shuffle_is_seeded_permutation():
    data = Dataset([CycleHistory("a", tuple(range(20, 40)), tuple(range(20)))])
    a, _ = apply_filter(data, CohortFilter(first_k_cycles=5), shuffle_seed=3)
    b, _ = apply_filter(data, CohortFilter(first_k_cycles=5), shuffle_seed=3)
    full, _ = apply_filter(data, CohortFilter(), shuffle_seed=3)
    assert a.histories == b.histories
    assert sorted(full.histories[0].cycles) == list(range(20, 40))
    # skips travel with their cycles
    assert all(c - 20 == s for c, s in zip(full.histories[0].cycles, full.histories[0].true_skips))
    assert a.histories[0].cycles == full.histories[0].cycles[:5]


@given(
    st.lists(st.lists(st.integers(1, 150), min_size=1, max_size=10), min_size=0, max_size=20),
    st.integers(1, 5),
    st.one_of(st.none(), st.integers(20, 120)),
)
@settings(max_examples=100, deadline=None)
def test_ingest_bookkeeping(all_cycles, min_cycles, gap):
    data = Dataset([CycleHistory(str(i), tuple(c)) for i, c in enumerate(all_cycles)])
    out, report = apply_filter(data, CohortFilter(min_cycles=min_cycles, max_gap_days=gap))
    assert report.users_in == report.users_kept + report.users_removed
    assert report.users_kept == len(out)


def test_cohort_filter_validation():
    with pytest.raises(DomainError):
        CohortFilter(min_cycles=0)
    with pytest.raises(DomainError):
        CohortFilter(first_k_cycles=0)


def test_split_last():
    data = Dataset([CycleHistory("a", (30, 31, 32)), CycleHistory("b", (28,))])
    train, target = data.split_last(2)
    assert [h.cycles for h in train] == [(30, 31), (28,)]
    assert target == [32, None]


def test_read_ages_bad_columns(tmp_path):
    with pytest.raises(DataError):
        read_ages(write(tmp_path, "id,years\na,3\n", "ages.csv"))


def test_empty_dataset_passes_filter_with_no_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out, report = apply_filter(Dataset([]), CohortFilter(min_cycles=3))
    assert len(out) == 0 and report.users_in == 0
