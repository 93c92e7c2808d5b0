import pytest

from m3h.errors import DomainError
from m3h.gradcheck import check_point, term_values, tiny_problem
from m3h.training import loss_terms, term_loss


def test_term_values_match_individual_losses():
    model, batch = tiny_problem(2)
    shared = term_values(model, batch)
    assert list(shared) == loss_terms(model)
    for term, value in shared.items():
        assert value == term_loss(model, batch, term).item()
    # the temporary forward override must not leak
    assert "forward" not in vars(model)


def test_full_network_at_small_step():
    worst = check_point(0, eps=1e-5)
    assert {kind for kind, _ in worst} == {"contrastive", "binary", "multiclass", "regression", "cluster"}
    assert max(worst.values()) < 1e-4


@pytest.mark.parametrize("eps", [0.0, -1e-5, 0.1])
def test_rejects_bad_step(eps):
    with pytest.raises(DomainError):
        check_point(0, eps=eps)
