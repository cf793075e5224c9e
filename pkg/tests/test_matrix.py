from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from mechpilot.matrix import (
    AccessLevel,
    CellMismatch,
    ClaimCategoryCoding,
    Color,
    InstrumentRow,
    MatrixError,
    Recoding,
    UnknownCategory,
    UnknownRow,
    aggregate_finding,
    cell_color,
    dump_csv,
    load_recodings,
    parse_csv,
    row_display,
    rows_digest,
    sensitivity,
    shipped_inventory,
    shipped_inventory_path,
    shipped_recodings_path,
    summarize,
)

levels = st.sampled_from(list(AccessLevel))
codings = st.builds(ClaimCategoryCoding, st.sampled_from(["decomposable", "latent_absence"]), levels, levels,
                    st.booleans())

# Cell column of the published inventory, keyed by instrument.
EXPECTED_CELLS = {
    "EU AI Act (Art. 14, 16, 43)": "R",
    "EU AI Act (Art. 55, GPAI systemic)": "A",
    "GPAI Code of Practice (II.1)": "A",
    "NIST AI RMF 1.0": "A",
    "NIST GenAI Profile (AI 600-1)": "A",
    "California SB-53 (TFAIA)": "R",
    "California SB-1047 (vetoed)": "R",
    "Singapore MGF-GenAI + AI Verify": "G/A",
    "Canada Voluntary Code": "A",
    "Australia Vol. AI Safety Std": "A",
    "Japan AI Guidelines v1.0": "A",
    "South Korea AI Basic Act": "A",
    "India AI Governance Guidelines (Feb '26)": "A",
    "PRC Interim Measures": "A",
    "UK pro-innovation + AISI evals": "A",
    "Council of Europe AI Convention": "A",
    "Saudi AI Ethics Principles": "A",
    "UAE AI 2031": "A",
    "OECD Recommendation on AI": "A",
    "UNGA 78/265": "---",
    "Frontier Safety Frameworks": "A",
}


@pytest.fixture(scope="module")
def rows():
    return shipped_inventory()


def _row(*cs, comparator=False, name="X"):
    return InstrumentRow(name, "ZZ", frozenset({AccessLevel.B}), tuple(cs), comparator)


class TestCellColor:
    def test_worked_rows(self, rows):
        by = {r.instrument: r for r in rows}
        sg = by["Singapore MGF-GenAI + AI Verify"]
        assert cell_color(sg.coding("decomposable")) is Color.GREEN
        assert cell_color(by["South Korea AI Basic Act"].coding("latent_absence")) is Color.AMBER
        assert cell_color(by["California SB-53 (TFAIA)"].coding("latent_absence")) is Color.RED

    @given(codings)
    def test_partition(self, c):
        conds = [c.verifier_access >= c.implied_access,
                 c.verifier_access < c.implied_access and c.closable,
                 c.verifier_access < c.implied_access and not c.closable]
        assert sum(conds) == 1
        assert cell_color(c) is [Color.GREEN, Color.AMBER, Color.RED][conds.index(True)]

    @given(codings, levels)
    def test_raising_v_never_worsens(self, c, v):
        order = [Color.GREEN, Color.AMBER, Color.RED]
        if v >= c.verifier_access:
            assert order.index(cell_color(replace(c, verifier_access=v))) <= order.index(cell_color(c))

    @given(codings, levels)
    def test_raising_a_never_improves(self, c, a):
        order = [Color.GREEN, Color.AMBER, Color.RED]
        if a >= c.implied_access:
            assert order.index(cell_color(replace(c, implied_access=a))) >= order.index(cell_color(c))

    def test_access_order(self):
        assert AccessLevel.B < AccessLevel.OtB < AccessLevel.G < AccessLevel.W < AccessLevel.S

    def test_unknown_category(self):
        with pytest.raises(UnknownCategory):
            ClaimCategoryCoding("vibes", AccessLevel.B)


class TestRows:
    def test_display(self):
        g = ClaimCategoryCoding("decomposable", AccessLevel.B)
        a = ClaimCategoryCoding("latent_absence", AccessLevel.G)
        assert row_display(_row(g, a)) == "G/A"
        assert row_display(_row(a)) == "A"
        assert row_display(_row(g)) == "G"
        assert row_display(_row(comparator=True)) == "---"

    def test_non_comparator_needs_coding(self):
        with pytest.raises(MatrixError):
            _row()

    def test_shipped_cells(self, rows):
        assert {r.instrument: row_display(r) for r in rows} == EXPECTED_CELLS

    def test_counts(self, rows):
        s = summarize(rows)
        assert (s.total_rows, s.comparators, s.instruments, s.jurisdictions) == (21, 4, 17, 13)

    def test_default_verifier_access_is_behavioural(self, rows):
        assert all(c.verifier_access is AccessLevel.B for r in rows for c in r.codings)


class TestFinding:
    def test_shipped_holds(self, rows):
        f = aggregate_finding(rows)
        assert f.holds and f.gap_row_count == 20

    def test_broken_by_full_access(self, rows):
        r = rows[1]
        full = tuple(replace(c, verifier_access=AccessLevel.S) for c in r.codings)
        changed = list(rows)
        changed[1] = replace(r, codings=full)
        assert not aggregate_finding(changed).holds

    def test_comparators_do_not_decide(self):
        g = ClaimCategoryCoding("decomposable", AccessLevel.B)
        a = ClaimCategoryCoding("decomposable", AccessLevel.G)
        assert aggregate_finding([_row(a), _row(g, comparator=True, name="C")]).holds

    def test_empty(self):
        with pytest.raises(MatrixError):
            aggregate_finding([])


class TestSensitivity:
    def test_contested_recoding(self, rows):
        before = rows_digest(rows)
        rep = sensitivity(rows, load_recodings(shipped_recodings_path()))
        assert rep.gap_row_count_after >= 17 and rep.finding_after
        assert len(rep.deltas) == 5 and all(d.after is Color.GREEN for d in rep.deltas)
        assert rows_digest(rows) == before

    def test_empty_recoding_is_identity(self, rows):
        rep = sensitivity(rows, [])
        f = aggregate_finding(rows)
        assert (rep.finding_after, rep.gap_row_count_after) == (f.holds, f.gap_row_count)

    def test_amber_to_red_non_decreasing(self, rows):
        amber = [(r, c) for r in rows for c in r.codings
                 if c.category == "latent_absence" and cell_color(c) is Color.AMBER]
        base = aggregate_finding(rows).gap_row_count
        for r, c in amber:
            rep = sensitivity(rows, [Recoding(r.instrument, replace(c, closable=False))])
            assert rep.gap_row_count_after >= base

    def test_unknown_row_and_category(self, rows):
        c = ClaimCategoryCoding("decomposable", AccessLevel.B)
        with pytest.raises(UnknownRow):
            sensitivity(rows, [Recoding("Atlantis AI Act", c)])
        sb53 = "California SB-53 (TFAIA)"
        with pytest.raises(UnknownCategory):
            sensitivity(rows, [Recoding(sb53, c)])


class TestCsv:
    def test_dump_reproduces_shipped_file(self, rows):
        assert dump_csv(rows) == shipped_inventory_path().read_text()

    def test_cell_mismatch_detected(self):
        text = shipped_inventory_path().read_text().replace(",A,euaiact", ",G,euaiact", 1)
        with pytest.raises(CellMismatch):
            parse_csv(text)

    def test_missing_column(self):
        with pytest.raises(MatrixError):
            parse_csv("instrument,jurisdiction\nX,Y\n")

    def test_inconsistent_row_fields(self):
        lines = shipped_inventory_path().read_text().splitlines()
        lines[2] = lines[2].replace(",EU,", ",US,", 1)
        with pytest.raises(MatrixError):
            parse_csv("\n".join(lines) + "\n")

    def test_bad_access_level(self):
        text = shipped_inventory_path().read_text().replace(",OtB,B,true,A,", ",XX,B,true,A,", 1)
        with pytest.raises(MatrixError):
            parse_csv(text)
