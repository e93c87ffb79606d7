from decimal import Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from virtualstain.study import AdjudicationRecord, parse_records, percent, table1_records, tally_study

verdicts = st.lists(st.sampled_from("ICD"), min_size=1, max_size=200)


def test_table1_overall():
    t = tally_study(table1_records())
    assert t.n == 48
    assert t.overall == {"I": 22, "C": 23, "D": 3}
    assert t.percentages == {"I": Decimal("45.8"), "C": Decimal("47.9"), "D": Decimal("6.3")}


def test_table1_per_pathologist():
    t = tally_study(table1_records())
    got = [tuple(t.per_pathologist[p][v] for v in "ICD") for p in sorted(t.per_pathologist)]
    assert got == [(10, 6, 0), (4, 11, 1), (8, 6, 2)]


def test_table1_covers_every_case_once_per_pathologist():
    recs = table1_records()
    for p in {r.pathologist_id for r in recs}:
        assert sorted(r.case_id for r in recs if r.pathologist_id == p) == list(range(1, 17))


def test_single_record():
    t = tally_study([AdjudicationRecord(1, "P1", "C")])
    assert t.percentages["C"] == Decimal("100.0")
    assert t.percentages["I"] == Decimal("0.0")


def test_round_half_up():
    assert percent(1, 8) == Decimal("12.5")
    assert percent(1, 16) == Decimal("6.3")  # 6.25 rounds up
    assert percent(1, 3) == Decimal("33.3")


@given(verdicts)
def test_percentages_sum_to_100(vs):
    t = tally_study([AdjudicationRecord(1 + i % 16, "P", v) for i, v in enumerate(vs)])
    assert abs(sum(t.percentages.values()) - 100) <= Decimal("0.2")
    assert sum(t.overall.values()) == len(vs)


def test_invalid_input():
    with pytest.raises(ValueError):
        AdjudicationRecord(1, "P1", "X")
    with pytest.raises(ValueError):
        AdjudicationRecord(17, "P1", "I")
    with pytest.raises(ValueError):
        tally_study([])
    with pytest.raises(ValueError):
        parse_records("case,who,verdict\n1,P1,I\n")
    with pytest.raises(ValueError):
        parse_records("case_id,pathologist_id,verdict\n1,P1,maybe\n")


def test_csv_and_table_output():
    t = tally_study(table1_records())
    rows = t.to_csv().splitlines()
    assert rows[0] == "group,I,C,D" and rows[-2] == "overall,22,23,3" and rows[-1] == "percent,45.8,47.9,6.3"
    assert "45.8" in t.table()
