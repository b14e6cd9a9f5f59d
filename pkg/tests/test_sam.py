import numpy as np
import pytest

from botkit.nn import Parameter
from botkit.sam import (
    SAM,
    Adam,
    AdamConfig,
    AdamState,
    NonFiniteGradientError,
    SamConfig,
    adam_step,
    global_norm,
    perturb,
    sam_step,
)


def params(*arrays):
    return [Parameter(np.asarray(a, dtype=np.float64)) for a in arrays]


def quadratic_evaluator(ps, calls=None):
    """f(w) = 0.5 * sum w^2 over every parameter; gradient is w."""

    def evaluator(perturbed):
        if calls is not None:
            calls.append((perturbed, [p.data.copy() for p in ps]))
        loss = 0.5 * sum(float(np.sum(p.data**2)) for p in ps)
        return loss, [p.data.copy() for p in ps]

    return evaluator


def test_perturb_unit_norm_scaling():
    (p,) = params([0.0, 0.0])
    eps, norm = perturb([p], [np.array([3.0, 4.0])], 1.0)
    np.testing.assert_allclose(eps[0], [0.6, 0.8], atol=1e-15)
    np.testing.assert_allclose(p.data, [0.6, 0.8], atol=1e-15)
    assert norm == 5.0


def test_perturb_joint_norm():
    ps = params([0.0, 0.0], [0.0, 0.0])
    grads = [np.array([1.0, 0.0]), np.array([0.0, 2.0])]
    eps, norm = perturb(ps, grads, 0.05)
    assert norm == pytest.approx(np.sqrt(5.0), abs=1e-15)
    for e, g in zip(eps, grads):
        np.testing.assert_allclose(e, 0.05 / np.sqrt(5.0) * g, atol=1e-15)
    assert global_norm(eps) == pytest.approx(0.05, abs=1e-12)


def test_perturb_zero_radius_and_zero_gradient():
    (p,) = params([1.0, 2.0])
    eps, _ = perturb([p], [np.array([3.0, 4.0])], 0.0)
    assert np.all(eps[0] == 0) and np.array_equal(p.data, [1.0, 2.0])
    eps, norm = perturb([p], [np.zeros(2)], 0.05)
    assert norm == 0.0 and np.all(eps[0] == 0) and np.array_equal(p.data, [1.0, 2.0])


def test_zero_gradient_step_is_flagged():
    ps = params([0.0])
    report = SAM(ps).step(quadratic_evaluator(ps))
    assert not report.perturbed and report.eps_norm == 0.0


def test_negative_rho_rejected():
    with pytest.raises(ValueError):
        SamConfig(rho=-0.1)


def test_adam_first_step_is_minus_lr():
    (p,) = params([0.0])
    adam_step(AdamState.for_params([p]), [p], [np.array([1.0])], AdamConfig(weight_decay=0.0))
    assert p.data[0] == pytest.approx(-3e-5, rel=1e-3)


def test_adam_null_gradient_and_pure_decay():
    ps = params([1.0, -2.0])
    adam_step(AdamState.for_params(ps), ps, [np.zeros(2)], AdamConfig(weight_decay=0.0))
    np.testing.assert_array_equal(ps[0].data, [1.0, -2.0])

    cfg = AdamConfig(learning_rate=1e-2, weight_decay=0.5)
    adam_step(AdamState.for_params(ps), ps, [np.zeros(2)], cfg)
    np.testing.assert_allclose(ps[0].data, np.array([1.0, -2.0]) * (1 - 1e-2 * 0.5), atol=1e-15)


def test_adam_bias_correction_trace():
    # hand trace of two steps with g = 1 then g = -1, no decay
    (p,) = params([0.0])
    cfg = AdamConfig(learning_rate=0.1, weight_decay=0.0)
    state = AdamState.for_params([p])
    w = 0.0
    m = v = 0.0
    for step, g in enumerate([1.0, -1.0], start=1):
        adam_step(state, [p], [np.array([g])], cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
        assert p.data[0] == pytest.approx(w, abs=1e-15)
    assert state.step == 2


def test_nan_gradient_rejected_without_changes():
    ps = params([1.0, 2.0])
    state = AdamState.for_params(ps)
    with pytest.raises(NonFiniteGradientError):
        adam_step(state, ps, [np.array([np.nan, 0.0])], AdamConfig())
    assert np.array_equal(ps[0].data, [1.0, 2.0]) and state.step == 0


def test_state_shape_mismatch_rejected():
    ps = params([1.0, 2.0])
    state = AdamState.for_params(params([1.0]))
    with pytest.raises(ValueError, match="shape"):
        adam_step(state, ps, [np.zeros(2)], AdamConfig())


def test_exactly_two_evaluations_and_restoration():
    ps = params([1.0, -1.0], [[0.5]])
    before = [p.data.copy() for p in ps]
    calls = []
    cfg = SamConfig(rho=0.1, base=AdamConfig(learning_rate=1e-2, weight_decay=0.0))
    opt = SAM(ps, cfg)
    opt.step(quadratic_evaluator(ps, calls))
    assert [c[0] for c in calls] == [False, True]
    # first call sees w, second sees w + eps with ||eps|| = rho
    for a, b in zip(calls[0][1], before):
        assert np.array_equal(a, b)
    shift = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(calls[1][1], before)))
    assert shift == pytest.approx(0.1, abs=1e-12)

    # final w is exactly one Adam update from w using the perturbed gradient
    ref = params(*before)
    adam_step(AdamState.for_params(ref), ref, [c.copy() for c in calls[1][1]], cfg.base)
    for p, r in zip(ps, ref):
        np.testing.assert_array_equal(p.data, r.data)


def test_evaluator_failure_restores_parameters():
    ps = params([1.0, 2.0])
    n = {"calls": 0}

    def evaluator(perturbed):
        n["calls"] += 1
        if perturbed:
            raise RuntimeError("boom")
        return 0.0, [np.array([1.0, 1.0])]

    with pytest.raises(RuntimeError, match="boom"):
        SAM(ps).step(evaluator)
    assert np.array_equal(ps[0].data, [1.0, 2.0])


def test_zero_rho_matches_plain_adam():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=5)
    cfg = AdamConfig(learning_rate=1e-2, weight_decay=1e-3)
    a = params(w0)
    b = params(w0)
    sam = SAM(a, SamConfig(rho=0.0, base=cfg))
    adam = Adam(b, cfg)
    for _ in range(50):
        sam.step(quadratic_evaluator(a))
        adam.step([b[0].data.copy()])
    np.testing.assert_array_equal(a[0].data, b[0].data)


def test_quadratic_descends_and_ascent_property():
    ps = params([1.0])
    opt = SAM(ps, SamConfig(rho=0.1, base=AdamConfig(learning_rate=5e-3, weight_decay=0.0)))
    traj = [1.0]
    for _ in range(200):
        report = opt.step(quadratic_evaluator(ps))
        assert report.loss_w_plus_eps >= report.loss_w - 1e-9
        traj.append(abs(float(ps[0].data[0])))
    diffs = np.diff(traj[5:])
    assert np.all(diffs < 0)
    assert traj[-1] < 0.5 * traj[0]


def test_trajectories_deterministic():
    def run():
        ps = params(np.linspace(-1, 1, 4))
        opt = SAM(ps, SamConfig(rho=0.05, base=AdamConfig(learning_rate=1e-2)))
        for _ in range(20):
            opt.step(quadratic_evaluator(ps))
        return ps[0].data.copy()

    np.testing.assert_array_equal(run(), run())
