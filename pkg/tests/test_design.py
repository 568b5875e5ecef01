
import pytest

from smart_cluster.design import (
    ADEPT,
    PROTOTYPICAL,
    DesignError,
    EmbeddedDtr,
    TreatmentPath,
    cell_label,
    check_path,
    consistent_dtrs,
    design_cells,
    embedded_dtrs,
    is_consistent,
    known_weight,
    parse_design,
)


def test_embedded_dtrs_adept():
    assert embedded_dtrs(ADEPT) == [EmbeddedDtr(1, 1), EmbeddedDtr(1, -1), EmbeddedDtr(-1, None)]
    assert len(embedded_dtrs(ADEPT)) == 3


def test_embedded_dtrs_prototypical():
    assert embedded_dtrs(PROTOTYPICAL) == [
        EmbeddedDtr(1, 1),
        EmbeddedDtr(1, -1),
        EmbeddedDtr(-1, 1),
        EmbeddedDtr(-1, -1),
    ]


def test_adept_a2_unset_iff_a1_negative():
    for d in embedded_dtrs(ADEPT):
        assert (d.a2 is None) == (d.a1 == -1)
    assert all(d.a2 is not None for d in embedded_dtrs(PROTOTYPICAL))


def test_consistency_examples():
    assert is_consistent(TreatmentPath(1, 1), EmbeddedDtr(1, 1), ADEPT)
    assert not is_consistent(TreatmentPath(1, 0, -1), EmbeddedDtr(1, 1), ADEPT)
    assert is_consistent(TreatmentPath(-1, 0), EmbeddedDtr(-1), ADEPT)


def test_known_weights_match_tables():
    assert known_weight(TreatmentPath(1, 1), ADEPT) == 2
    assert known_weight(TreatmentPath(1, 0, 1), ADEPT) == 4
    assert known_weight(TreatmentPath(-1, 0), ADEPT) == 2
    assert known_weight(TreatmentPath(-1, 0, -1), PROTOTYPICAL) == 4
    assert known_weight(TreatmentPath(-1, 1), PROTOTYPICAL) == 2


def test_unequal_probabilities():
    path = TreatmentPath(1, 0, 1, rand_prob_stage1=0.6, rand_prob_stage2=0.25)
    assert known_weight(path, ADEPT) == pytest.approx(1 / (0.6 * 0.25))


@pytest.mark.parametrize("prob", [0.0, 1.0, -0.2, 1.5])
def test_probabilities_outside_unit_interval_rejected(prob):
    with pytest.raises(DesignError):
        TreatmentPath(1, 1, rand_prob_stage1=prob)
    with pytest.raises(DesignError):
        TreatmentPath(1, 0, 1, rand_prob_stage2=prob)


def test_path_validation():
    with pytest.raises(DesignError, match="responder"):
        check_path(TreatmentPath(1, 1, 1), ADEPT)
    with pytest.raises(DesignError):
        check_path(TreatmentPath(-1, 0, 1), ADEPT)
    with pytest.raises(DesignError):
        check_path(TreatmentPath(-1, 0), PROTOTYPICAL)
    with pytest.raises(DesignError):
        check_path(TreatmentPath(1, 0), ADEPT)
    with pytest.raises(DesignError):
        TreatmentPath(1, 1, None, 0.5, 0.5)


def test_stage2_probability_defaults():
    assert TreatmentPath(1, 0, 1).rand_prob_stage2 == 0.5
    assert TreatmentPath(1, 1).rand_prob_stage2 is None


@pytest.mark.parametrize("design", [ADEPT, PROTOTYPICAL])
def test_consistent_counts(design):
    for a1, r, a2 in design_cells(design):
        n = len(consistent_dtrs(TreatmentPath(a1, r, a2), design))
        assert n >= 1
        if r == 1 and (design is PROTOTYPICAL or a1 == 1):
            assert n == 2
        elif r == 0 and a2 is not None:
            assert n == 1
    # ADEPT cells D and E each belong to the single a1=-1 regimen
    assert len(consistent_dtrs(TreatmentPath(-1, 1), ADEPT)) == 1


@pytest.mark.parametrize("design", [ADEPT, PROTOTYPICAL])
@pytest.mark.parametrize("p_first,p_second", [(0.5, 0.5), (0.3, 0.5), (0.5, 0.2), (0.7, 0.9)])
def test_weights_invert_path_probability_per_dtr(design, p_first, p_second):
    # For each regimen and each response status, the probability of following the
    # regimen's path times its weight is one; summing I/W over a1-matching
    # patterns at fixed R gives Pr(A1=a1) * Pr(A2=a2 | ...) mass.
    for dtr in embedded_dtrs(design):
        for r in (0, 1):
            total = 0.0
            for a1, rr, a2 in design_cells(design):
                if rr != r:
                    continue
                path = TreatmentPath(a1, r, a2, p_first, None if a2 is None else p_second)
                if is_consistent(path, dtr, design):
                    total += 1.0 / known_weight(path, design)
                    prob = p_first * (p_second if a2 is not None else 1.0)
                    assert known_weight(path, design) * prob == pytest.approx(1.0)
            expected = p_first * (p_second if (r == 0 and (design is PROTOTYPICAL or dtr.a1 == 1)) else 1.0)
            assert total == pytest.approx(expected)


def test_cell_labels():
    assert cell_label(TreatmentPath(1, 0, -1), ADEPT) == "C"
    assert cell_label(TreatmentPath(-1, 0), ADEPT) == "E"
    assert cell_label(TreatmentPath(-1, 0, -1), PROTOTYPICAL) == "F"
    assert len(design_cells(ADEPT)) == 5
    assert len(design_cells(PROTOTYPICAL)) == 6


def test_parse_labels():
    assert EmbeddedDtr.parse("(-1,.)") == EmbeddedDtr(-1)
    assert EmbeddedDtr.parse(" (1, -1) ") == EmbeddedDtr(1, -1)
    assert parse_design("ADEPT") is ADEPT
    with pytest.raises(DesignError):
        parse_design("three-stage")
    with pytest.raises(DesignError):
        EmbeddedDtr.parse("(2,1)")


def test_dtr_not_in_design():
    with pytest.raises(DesignError):
        is_consistent(TreatmentPath(-1, 1), EmbeddedDtr(-1, 1), ADEPT)
