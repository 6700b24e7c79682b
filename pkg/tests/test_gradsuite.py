import pytest

from dvalab import gradsuite


@pytest.mark.parametrize("family", sorted(gradsuite.CASES))
def test_family_passes_on_a_few_configurations(family):
    rep = gradsuite.run_family(family, n=5, seed=3)
    assert rep.configs == 5
    assert rep.passed, rep


def test_suite_is_deterministic():
    a = gradsuite.run_suite(n=3, seed=11, families=["mlp", "dva"])
    b = gradsuite.run_suite(n=3, seed=11, families=["mlp", "dva"])
    assert [r.max_error for r in a] == [r.max_error for r in b]


def test_flow_tolerance_is_looser_than_closed_form_losses():
    assert gradsuite.TOLERANCE["flow"] == 1e-4
    assert all(gradsuite.TOLERANCE[k] == 1e-5 for k in ("mlp", "va", "dva"))
