from decimal import Decimal

import pytest

from shapecap import costs


def test_published_rows_reproduced_exactly():
    table = dict(costs.cost_table())
    assert table["Feng et al."] == "76.7k"
    assert table["Laina et al."] == "113.4k"
    assert table["Cao et al."] == "95.0k"
    assert table["Gu et al."] == "1176.1k"
    assert table["SCS"] == "414.7k"
    assert table["WS-UIC"] == "40.0k"


def test_caption_pair_only_rows_unpriced():
    table = dict(costs.cost_table())
    for name in ("Pivoting", "Song et al.", "Guo et al."):
        assert table[name] == "-"


def test_worked_example_gu():
    row = next(r for r in costs.builtin_rows() if r.approach == "Gu et al.")
    assert costs.labeling_cost(row) == Decimal("1176120.00")


def test_ws_uic_cost():
    row = next(r for r in costs.builtin_rows() if r.approach == "WS-UIC")
    assert costs.labeling_cost(row) == Decimal("39960.00")


def test_all_zero_counts():
    assert costs.labeling_cost(costs.CostRow("nothing")) == 0


def test_cost_ratio_about_thirty():
    rows = {r.approach: r for r in costs.builtin_rows()}
    ratio = costs.labeling_cost(rows["Gu et al."]) / costs.labeling_cost(rows["WS-UIC"])
    assert Decimal("29") <= ratio <= Decimal("31")


def test_linearity_in_counts_and_multiplicity():
    base = costs.CostRow("x", bbox_m=Decimal("1"), triplet_m=Decimal("2"),
                         image_level_m=Decimal("3"))
    doubled = costs.CostRow("x", bbox_m=Decimal("2"), triplet_m=Decimal("4"),
                            image_level_m=Decimal("6"))
    assert costs.labeling_cost(doubled) == 2 * costs.labeling_cost(base)
    more_labelers = costs.CostRow("x", bbox_m=Decimal("1"), triplet_m=Decimal("2"),
                                  image_level_m=Decimal("3"), labelers=6)
    assert costs.labeling_cost(more_labelers) == 2 * costs.labeling_cost(base)


def test_negative_count_rejected():
    with pytest.raises(ValueError):
        costs.CostRow("bad", bbox_m=Decimal("-1"))


def test_format_table_all_pass():
    text = costs.format_table()
    assert "FAIL" not in text
    assert text.count("PASS") == 9
