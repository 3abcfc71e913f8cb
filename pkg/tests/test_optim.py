"""SGD update rule and one-cycle schedule behaviour."""

import numpy as np
import pytest

from merchcat import autodiff as ad
from merchcat.errors import UsageError
from merchcat.optim import OneCycleSchedule, SgdState, one_cycle_at, sgd_step


def make_param(values):
    p = ad.parameter(np.asarray(values, dtype=float))
    p.grad = np.ones_like(p.data)
    return p


class TestSgd:
    def test_zero_lr_leaves_params_unchanged(self):
        p = make_param([1.0, -2.0])
        state = SgdState.for_params([p], learning_rate=0.0, momentum=0.9)
        before = p.data.copy()
        for _ in range(5):
            sgd_step([p], state)
        np.testing.assert_allclose(p.data, before)

    def test_plain_gradient_descent_reduction(self):
        p = make_param([1.0, 2.0, 3.0])
        p.grad = np.array([0.5, -1.0, 2.0])
        state = SgdState.for_params([p], learning_rate=0.1)
        sgd_step([p], state)
        np.testing.assert_allclose(p.data, [1.0, 2.0, 3.0] - 0.1 * np.array([0.5, -1.0, 2.0]))

    def test_two_momentum_steps_match_hand_unroll(self):
        p = make_param([0.0])
        g = 2.0
        p.grad = np.array([g])
        state = SgdState.for_params([p], learning_rate=0.1, momentum=0.9)
        sgd_step([p], state)
        p.grad = np.array([g])
        sgd_step([p], state)
        # v1 = g; x1 = -lr*g; v2 = 0.9*g + g; x2 = x1 - lr*v2
        want = -0.1 * g - 0.1 * (0.9 * g + g)
        assert p.data[0] == pytest.approx(want, rel=1e-12)

    def test_weight_decay_enters_velocity(self):
        p = make_param([10.0])
        p.grad = np.array([0.0])
        state = SgdState.for_params([p], learning_rate=0.1, weight_decay=0.01)
        sgd_step([p], state)
        assert p.data[0] == pytest.approx(10.0 - 0.1 * (0.01 * 10.0))

    def test_velocity_shapes_mirror_params(self):
        ps = [make_param(np.zeros((3, 4))), make_param(np.zeros(7))]
        state = SgdState.for_params(ps)
        assert [v.shape for v in state.velocities] == [(3, 4), (7,)]

    def test_missing_grad_rejected(self):
        p = ad.parameter(np.zeros(3))
        p.grad = None
        state = SgdState.for_params([p], learning_rate=0.1)
        with pytest.raises(UsageError):
            sgd_step([p], state)


class TestOneCycle:
    def test_endpoints_and_peak(self):
        sched = OneCycleSchedule(total_steps=1000, lr_max=1.0)
        lr0, m0 = one_cycle_at(sched, 0)
        assert lr0 == pytest.approx(1.0 / 25)
        assert m0 == pytest.approx(0.95)
        lr_peak, m_peak = one_cycle_at(sched, sched.peak_step)
        assert lr_peak == pytest.approx(1.0)
        assert m_peak == pytest.approx(0.85)
        lr_end, m_end = one_cycle_at(sched, 1000)
        assert lr_end == pytest.approx(1.0 / 1e4)
        assert m_end == pytest.approx(0.95)

    def test_momentum_moves_inversely_to_lr(self):
        sched = OneCycleSchedule(total_steps=500, lr_max=0.4)
        lrs, moms = zip(*[one_cycle_at(sched, s) for s in range(501)])
        dlr = np.diff(lrs)
        dmom = np.diff(moms)
        nonzero = dlr != 0
        assert (np.sign(dlr[nonzero]) == -np.sign(dmom[nonzero])).all()

    def test_out_of_range_step(self):
        sched = OneCycleSchedule(total_steps=10, lr_max=1.0)
        with pytest.raises(UsageError):
            one_cycle_at(sched, -1)
        with pytest.raises(UsageError):
            one_cycle_at(sched, 11)

    def test_adjacent_steps_stay_within_slope_bound(self):
        # Warmup covers (1 - 1/div) * lr_max over pct_start*total steps and the
        # cosine tail's steepest slope is pi/2 * lr_max / ((1 - pct_start)*total),
        # so the per-step change is bounded by the larger of the two.
        sched = OneCycleSchedule(total_steps=2000, lr_max=1.0)
        lrs = np.array([one_cycle_at(sched, s)[0] for s in range(2001)])
        diffs = np.abs(np.diff(lrs))
        up = (sched.lr_max - sched.lr_max / sched.div_factor) / sched.peak_step
        down = (
            np.pi / 2 * sched.lr_max / (sched.total_steps - sched.peak_step)
        )
        assert diffs.max() <= max(up, down) * 1.01

    def test_continuous_at_phase_boundary(self):
        sched = OneCycleSchedule(total_steps=997, lr_max=0.3)
        peak = sched.peak_step
        lr_a, _ = one_cycle_at(sched, peak)
        lr_b, _ = one_cycle_at(sched, peak + 1)
        assert abs(lr_a - lr_b) < 2 * 0.3 / 997 * 3
