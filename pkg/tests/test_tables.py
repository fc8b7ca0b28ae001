from readdisturb import tables as T


def test_twelve_chips_and_names():
    assert len(T.CHIPS) == 12 and len(T.BY_NAME) == 12
    assert T.targets_for("S-8Gb-B").hc_first_0to1 == 43840
    assert {c.manufacturer for c in T.CHIPS} == {"S", "H", "M"}


def test_published_orderings_hold():
    for c in T.CHIPS:
        assert c.hc_first_0to1 < c.hc_first_1to0
        assert c.maxflips_0to1 < c.maxflips_1to0
        assert c.hc_first_0to1 < c.hc_exceeds <= 500_000


def test_pairs():
    assert T.table_pairs(4)[0] == (43840, 241740)
    assert len(T.table_pairs(3)) == 12
