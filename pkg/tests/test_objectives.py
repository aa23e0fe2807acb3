import math

import numpy as np
import pytest

from fashionsap.core import autograd as ag
from fashionsap.core.autograd import Tensor
from fashionsap.errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidStateError,
    TrainingDivergenceError,
)
from fashionsap.objectives import (
    LossReport,
    fsis_loss,
    itm_loss,
    its_distributions,
    its_loss,
    its_similarities,
    ptp_loss,
    soft_targets,
    sum_parts,
    total_loss,
    trp_loss,
)

from .oracles import (
    bf_fsis,
    bf_its,
    bf_mean_ce,
    bf_soft_targets,
    central_diff_grad,
    grad_close,
)


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- fsis ---------------------------------------------------------------------


def test_fsis_endpoints():
    rng = np.random.default_rng(0)
    v = _unit_rows(rng, 4, 6)
    assert float(fsis_loss(Tensor(v), Tensor(v.copy())).data) == pytest.approx(0.0, abs=1e-12)
    assert float(fsis_loss(Tensor(v), Tensor(-v)).data) == pytest.approx(1.0, abs=1e-12)


def test_fsis_orthogonal_pairs():
    v1 = np.eye(4)[:2]
    v2 = np.eye(4)[2:]
    assert float(fsis_loss(Tensor(v1), Tensor(v2)).data) == pytest.approx(0.5, abs=1e-12)


def test_fsis_matches_bruteforce_100():
    rng = np.random.default_rng(1)
    for _ in range(100):
        b, d = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        vi, vs = _unit_rows(rng, b, d), _unit_rows(rng, b, d)
        got = float(fsis_loss(Tensor(vi), Tensor(vs)).data)
        assert abs(got - bf_fsis(vi, vs)) < 1e-10
        got_p = float(fsis_loss(Tensor(vi), Tensor(vs), form="as_printed").data)
        assert abs(got_p - bf_fsis(vi, vs, form="as_printed")) < 1e-10


def test_fsis_forms_coincide_at_batch_one():
    rng = np.random.default_rng(2)
    vi, vs = _unit_rows(rng, 1, 5), _unit_rows(rng, 1, 5)
    a = float(fsis_loss(Tensor(vi), Tensor(vs), "per_sample").data)
    b = float(fsis_loss(Tensor(vi), Tensor(vs), "as_printed").data)
    assert abs(a - b) < 1e-12


def test_fsis_in_unit_interval_property():
    rng = np.random.default_rng(3)
    for _ in range(50):
        vi = _unit_rows(rng, 8, 4)
        vs = _unit_rows(rng, 8, 4)
        val = float(fsis_loss(Tensor(vi), Tensor(vs)).data)
        assert -1e-12 <= val <= 1.0 + 1e-12


def test_fsis_rejects_unnormalized():
    with pytest.raises(InvalidInputError):
        fsis_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_fsis_gradient():
    rng = np.random.default_rng(4)
    vi0 = _unit_rows(rng, 3, 5)
    vs = _unit_rows(rng, 3, 5)
    t = Tensor(vi0.copy(), requires_grad=True)
    fsis_loss(t, Tensor(vs)).backward()
    numeric = central_diff_grad(lambda: float(fsis_loss(Tensor(vi0), Tensor(vs)).data), vi0)
    # perturbations break unit norm; widen the validator tolerance via tiny h instead
    assert grad_close(t.grad, numeric, rtol=1e-3, atol=1e-6)


# -- token cross-entropies --------------------------------------------------------


def test_ptp_uniform_logits_is_log_vocab():
    v = 23
    logits = Tensor(np.zeros((7, v)))
    got = float(ptp_loss(logits, np.arange(7) % v).data)
    assert abs(got - math.log(v)) < 1e-9


def test_ptp_perfect_prediction_limit():
    logits = np.full((4, 9), -40.0)
    logits[np.arange(4), [1, 2, 3, 4]] = 40.0
    assert float(ptp_loss(Tensor(logits), [1, 2, 3, 4]).data) < 1e-9


def test_ptp_matches_bruteforce_100():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n, v = int(rng.integers(1, 8)), int(rng.integers(2, 12))
        logits = rng.normal(size=(n, v)) * 3
        targets = rng.integers(0, v, size=n)
        got = float(ptp_loss(Tensor(logits), targets).data)
        assert abs(got - bf_mean_ce(logits, targets)) < 1e-10


def test_ptp_hand_computed_two_positions():
    logits = np.array([[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
    expect = bf_mean_ce(logits, [0, 2])
    assert float(ptp_loss(Tensor(logits), [0, 2]).data) == pytest.approx(expect, abs=1e-12)


def test_ptp_empty_supervision_warns_and_returns_zero(caplog):
    with caplog.at_level("WARNING", logger="fashionsap.objectives"):
        out = ptp_loss(None, np.empty(0, dtype=np.int64))
    assert float(out.data) == 0.0
    assert any("no supervised" in m for m in caplog.messages)


def test_trp_uniform_is_ln2():
    got = float(trp_loss(Tensor(np.zeros((11, 2))), np.ones(11, dtype=np.int64)).data)
    assert abs(got - math.log(2)) < 1e-9


def test_trp_separated_limit():
    logits = np.array([[30.0, -30.0], [-30.0, 30.0]])
    assert float(trp_loss(Tensor(logits), [0, 1]).data) < 1e-9


def test_trp_matches_bruteforce():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        logits = rng.normal(size=(n, 2)) * 2
        labels = rng.integers(0, 2, size=n)
        assert abs(float(trp_loss(Tensor(logits), labels).data) - bf_mean_ce(logits, labels)) < 1e-10


def test_itm_uniform_and_limits():
    assert float(itm_loss(Tensor(np.zeros((6, 2))), [1, 0, 1, 0, 1, 0]).data) == pytest.approx(
        math.log(2), abs=1e-9
    )
    logits = np.array([[-30.0, 30.0], [30.0, -30.0], [-30.0, 30.0], [30.0, -30.0]])
    assert float(itm_loss(Tensor(logits), [1, 0, 1, 0]).data) < 1e-9


def test_itm_hand_computed_four_pairs():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(4, 2))
    labels = np.array([1, 0, 0, 1])
    expect = bf_mean_ce(logits, labels)
    assert float(itm_loss(Tensor(logits), labels).data) == pytest.approx(expect, abs=1e-12)


# -- its ---------------------------------------------------------------------


def test_its_similarity_range_and_self_similarity():
    rng = np.random.default_rng(8)
    q = _unit_rows(rng, 3, 6)
    cand = np.concatenate([q, _unit_rows(rng, 4, 6)])
    s_t2i, s_i2t = its_similarities(Tensor(q.copy()), Tensor(q.copy()), cand, cand)
    for s in (s_t2i.data, s_i2t.data):
        assert s.shape == (3, 7)
        assert (s <= 1 + 1e-9).all() and (s >= -1 - 1e-9).all()
        assert np.allclose(np.diag(s[:, :3]), 1.0, atol=1e-9)


def test_its_similarities_hand_computed():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    cand = np.array([[1.0, 0.0], [0.0, 1.0], [math.sqrt(0.5), math.sqrt(0.5)]])
    s_t2i, _ = its_similarities(Tensor(q), Tensor(q), cand, cand)
    expect = np.array([[1.0, 0.0, math.sqrt(0.5)], [0.0, 1.0, math.sqrt(0.5)]])
    assert np.allclose(s_t2i.data, expect, atol=1e-12)


def test_its_similarities_empty_candidates():
    q = Tensor(np.eye(2))
    with pytest.raises(InvalidStateError):
        its_similarities(q, q, np.empty((0, 2)), np.empty((0, 2)))


def test_its_distributions_rows_sum_to_one_and_argmax_invariance():
    rng = np.random.default_rng(9)
    sims = Tensor(rng.uniform(-1, 1, size=(5, 9)))
    base = None
    for tau in (0.01, 0.07, 0.5):
        g = its_distributions(sims, tau).data
        assert np.allclose(g.sum(axis=1), 1.0, atol=1e-6)
        am = np.argmax(g, axis=1)
        if base is None:
            base = am
        assert (am == base).all()
    shifted = its_distributions(ag.add(sims, 5.0), 0.07).data
    assert (np.argmax(shifted, axis=1) == base).all()


def test_its_distributions_tau_to_zero_one_hot():
    sims = Tensor(np.array([[0.2, 0.9, -0.5]]))
    g = its_distributions(sims, 0.001).data
    assert np.argmax(g[0]) == 1 and g[0, 1] > 0.999


def test_its_distributions_rejects_bad_tau():
    with pytest.raises(InvalidConfigError):
        its_distributions(Tensor(np.zeros((1, 2))), 0.0)


def test_its_loss_perfect_one_hot_is_zero():
    g = np.full((2, 3), 1e-12)
    g[0, 0] = 1.0
    g[1, 1] = 1.0
    loss = its_loss(Tensor(g), Tensor(g.copy()), [0, 1])
    assert float(loss.data) < 1e-9


def test_its_loss_uniform_is_log_m():
    m = 13
    g = np.full((4, m), 1.0 / m)
    loss = its_loss(Tensor(g), Tensor(g.copy()), [0, 1, 2, 3])
    assert abs(float(loss.data) - math.log(m)) < 1e-9


def test_its_loss_distilled_hand_case():
    # one query, two candidates, alpha=0.4 soft target
    g = np.array([[0.7, 0.3]])
    mom = np.array([[0.2, 0.8]])
    alpha = 0.4
    y = bf_soft_targets([0], mom, alpha)
    expect = bf_its(g, g, y, y)
    got = float(its_loss(Tensor(g), Tensor(g.copy()), [0], mom, mom, alpha).data)
    assert got == pytest.approx(expect, abs=1e-12)


def test_its_loss_matches_bruteforce_100():
    rng = np.random.default_rng(10)
    for _ in range(100):
        b, m = int(rng.integers(1, 5)), int(rng.integers(2, 7))
        g1 = rng.dirichlet(np.ones(m), size=b)
        g2 = rng.dirichlet(np.ones(m), size=b)
        mom1 = rng.dirichlet(np.ones(m), size=b)
        mom2 = rng.dirichlet(np.ones(m), size=b)
        alpha = float(rng.uniform(0, 0.9))
        pos = rng.integers(0, m, size=b)
        got = float(its_loss(Tensor(g1), Tensor(g2), pos, mom1, mom2, alpha).data)
        expect = bf_its(g1, g2, bf_soft_targets(pos, mom1, alpha), bf_soft_targets(pos, mom2, alpha))
        assert abs(got - expect) < 1e-10


def test_its_loss_positive_out_of_range():
    g = np.full((2, 3), 1 / 3)
    with pytest.raises(InvalidInputError):
        its_loss(Tensor(g), Tensor(g.copy()), [0, 3])


def test_soft_targets_rows_sum_to_one():
    rng = np.random.default_rng(11)
    mom = rng.dirichlet(np.ones(5), size=3)
    y = soft_targets([0, 2, 4], mom, 0.4)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert (y >= 0).all()


# -- totals ---------------------------------------------------------------------


def test_total_loss_sums_exactly():
    report = total_loss(0.1, 0.2, 0.3, 0.4, 0.5)
    assert report.total == 0.1 + 0.2 + 0.3 + 0.4 + 0.5
    assert isinstance(report, LossReport)


def test_total_loss_zero_parts():
    assert total_loss(0.0, 0.0, 0.0, 0.0, 0.0).total == 0.0


def test_total_loss_names_nan_part():
    with pytest.raises(TrainingDivergenceError) as e:
        total_loss(0.1, float("nan"), 0.0, 0.0, 0.0)
    assert e.value.part == "ptp"
    with pytest.raises(TrainingDivergenceError) as e:
        total_loss(0.0, 0.0, 0.0, float("inf"), 0.0)
    assert e.value.part == "its"


def test_total_gradient_is_sum_of_part_gradients():
    rng = np.random.default_rng(12)
    x0 = rng.normal(size=(3, 4))

    def parts_of(t):
        a = ag.mean(ag.mul(t, t))
        b = ag.mean(ag.exp(ag.mul(t, 0.1)))
        return a, b

    t = Tensor(x0.copy(), requires_grad=True)
    a, b = parts_of(t)
    sum_parts([a, b]).backward()
    g_total = t.grad.copy()

    t1 = Tensor(x0.copy(), requires_grad=True)
    parts_of(t1)[0].backward()
    t2 = Tensor(x0.copy(), requires_grad=True)
    parts_of(t2)[1].backward()
    assert np.allclose(g_total, t1.grad + t2.grad, atol=1e-12)


def test_loss_report_json_line_keys():
    line = total_loss(0.1, 0.2, 0.3, 0.4, 0.5).to_json_line(7)
    import json

    obj = json.loads(line)
    assert list(obj) == ["step", "fsis", "ptp", "trp", "its", "itm", "total"]
    assert obj["step"] == 7


# -- loss gradients -----------------------------------------------------------


def test_each_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)

    logits0 = rng.normal(size=(5, 7))
    t = Tensor(logits0.copy(), requires_grad=True)
    ptp_loss(t, [1, 2, 3, 4, 5]).backward()
    assert grad_close(
        t.grad,
        central_diff_grad(lambda: float(ptp_loss(Tensor(logits0), [1, 2, 3, 4, 5]).data), logits0),
    )

    logits2 = rng.normal(size=(6, 2))
    t2 = Tensor(logits2.copy(), requires_grad=True)
    trp_loss(t2, [0, 1, 0, 1, 1, 0]).backward()
    assert grad_close(
        t2.grad,
        central_diff_grad(lambda: float(trp_loss(Tensor(logits2), [0, 1, 0, 1, 1, 0]).data), logits2),
    )

    sims0 = rng.uniform(-1, 1, size=(3, 5))
    mom = rng.dirichlet(np.ones(5), size=3)

    def its_value():
        g = its_distributions(Tensor(sims0), 0.3)
        return float(its_loss(g, g, [0, 1, 2], mom, mom, 0.4).data)

    ts = Tensor(sims0.copy(), requires_grad=True)
    g = its_distributions(ts, 0.3)
    its_loss(g, g, [0, 1, 2], mom, mom, 0.4).backward()
    assert grad_close(ts.grad, central_diff_grad(its_value, sims0))
