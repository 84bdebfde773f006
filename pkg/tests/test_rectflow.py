import numpy as np
import pytest

from restorect import autodiff as ad
from restorect import ndtensor as nd
from restorect import nn_blocks as nn
from restorect import rectflow as rf


class ConstantVelocityNet:
    """Oracle net returning a fixed velocity regardless of inputs."""

    t_max = 4

    def __init__(self, v):
        self.v = np.asarray(v, dtype=np.float64)
        self.calls = 0

    def forward(self, x, t, c):
        self.calls += 1
        return ad.constant(np.broadcast_to(self.v, x.shape).copy())


class ExactVelocityNet:
    """Oracle that knows the true straight-path velocity f - z per item."""

    t_max = 4

    def __init__(self, z, f):
        self.v = np.asarray(f) - np.asarray(z)

    def forward(self, x, t, c):
        return ad.constant(self.v)


# -- interpolate / velocity_target ---------------------------------------------------

def test_interpolate_endpoints_and_midpoint():
    z = ad.constant(np.zeros((1, 4)))
    f = ad.constant(np.full((1, 4), 2.0))
    np.testing.assert_array_equal(rf.interpolate(z, f, 0.0).data, z.data)
    np.testing.assert_array_equal(rf.interpolate(z, f, 1.0).data, f.data)
    np.testing.assert_array_equal(rf.interpolate(z, f, 0.5).data, 1.0)


def test_interpolate_rejects_bad_t():
    z = ad.constant(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        rf.interpolate(z, z, 1.5)
    with pytest.raises(ValueError):
        rf.interpolate(z, z, -0.1)


def test_interpolate_affine_in_endpoints():
    rng = nd.Rng(0)
    z = rng.normal((2, 5))
    f = rng.normal((2, 5))
    for t in (0.25, 0.7):
        a = 3.5
        scaled = rf.interpolate(ad.constant(a * z), ad.constant(a * f), t).data
        base = rf.interpolate(ad.constant(z), ad.constant(f), t).data
        np.testing.assert_allclose(scaled, a * base, rtol=1e-12)


def test_velocity_target_properties():
    rng = nd.Rng(1)
    z = rng.normal((3, 4))
    f = rng.normal((3, 4))
    np.testing.assert_array_equal(rf.velocity_target(ad.constant(f), ad.constant(f)).data, 0.0)
    np.testing.assert_array_equal(
        rf.velocity_target(ad.constant(np.zeros_like(f)), ad.constant(f)).data, f)
    np.testing.assert_array_equal(
        rf.velocity_target(ad.constant(z), ad.constant(f)).data,
        -rf.velocity_target(ad.constant(f), ad.constant(z)).data)
    with pytest.raises(ValueError):
        rf.velocity_target(ad.constant(np.zeros((1, 3))), ad.constant(np.zeros((1, 4))))


# -- velocity matching loss ---------------------------------------------------------------

def test_velocity_loss_zero_for_exact_oracle():
    rng = nd.Rng(2)
    z = rng.normal((4, 6))
    f = rng.normal((4, 6))
    c = rng.normal((4, 6))
    net = ExactVelocityNet(z, f)
    loss = rf.velocity_matching_loss(net, (ad.constant(z), ad.constant(f), ad.constant(c)),
                                     nd.Rng(7))
    assert loss.item() == pytest.approx(0.0, abs=1e-24)


def test_velocity_loss_zero_net_closed_form():
    rng = nd.Rng(3)
    z = rng.normal((5, 8))
    f = rng.normal((5, 8))
    c = rng.normal((5, 8))
    net = ConstantVelocityNet(np.zeros(8))
    loss = rf.velocity_matching_loss(net, (ad.constant(z), ad.constant(f), ad.constant(c)),
                                     nd.Rng(8))
    expected = (((f - z) ** 2).sum(axis=1)).mean()
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_velocity_loss_empty_batch_error():
    net = ConstantVelocityNet(np.zeros(4))
    empty = ad.constant(np.zeros((0, 4)))
    with pytest.raises(ValueError):
        rf.velocity_matching_loss(net, (empty, empty, empty), nd.Rng(0))


def test_velocity_loss_gradient_fd():
    rng = nd.Rng(4)
    net = nn.VelocityPredictor(rng.derive("n"), feature_dim=6, cond_dim=6)
    z = rng.normal((3, 6))
    f = rng.normal((3, 6))
    c = rng.normal((3, 6))

    def f_loss():
        # fixed rng per evaluation so the sampled t values are constant
        return rf.velocity_matching_loss(net, (ad.constant(z), ad.constant(f), ad.constant(c)),
                                         nd.Rng(99))

    report = ad.fd_check(f_loss, list(net.params().values()), h=1e-5, tol=1e-4, max_entries=8)
    assert report.passed, report.summary()


# -- euler sampling ---------------------------------------------------------------------------

def test_euler_exact_for_constant_field():
    rng = nd.Rng(5)
    z = rng.normal((2, 6))
    f = rng.normal((2, 6))
    for steps in (1, 2, 4):
        net = ExactVelocityNet(z, f)
        out, traj = rf.euler_sample(net, ad.constant(z), ad.constant(np.zeros((2, 6))),
                                    rf.SamplerConfig(steps))
        assert np.abs(out.data - f).max() < 1e-12
        assert len(traj) == steps


def test_euler_step_count_invariance_for_straight_field():
    rng = nd.Rng(6)
    z = rng.normal((1, 4))
    f = rng.normal((1, 4))
    c = ad.constant(np.zeros((1, 4)))
    net = ExactVelocityNet(z, f)
    one = rf.euler_sample(net, ad.constant(z), c, rf.SamplerConfig(1))[0].data
    four = rf.euler_sample(net, ad.constant(z), c, rf.SamplerConfig(4))[0].data
    assert np.abs(one - four).max() < 1e-12


def test_euler_calls_net_exactly_steps_times():
    for steps in (1, 3, 5):
        net = ConstantVelocityNet(np.ones(4))
        rf.euler_sample(net, ad.constant(np.zeros((1, 4))), ad.constant(np.zeros((1, 4))),
                        rf.SamplerConfig(steps))
        assert net.calls == steps


def test_euler_rejects_wrong_kind():
    net = ConstantVelocityNet(np.ones(4))
    with pytest.raises(ValueError):
        rf.euler_sample(net, ad.constant(np.zeros((1, 4))), ad.constant(np.zeros((1, 4))),
                        rf.SamplerConfig(2, kind=rf.DDIM_BASELINE))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        rf.SamplerConfig(0)
    with pytest.raises(ValueError):
        rf.SamplerConfig(6)
    with pytest.raises(ValueError):
        rf.SamplerConfig(2, kind="euler_maruyama")


def test_flow_state_validates_time():
    rf.FlowState(ad.constant(np.zeros(2)), 0.5, ad.constant(np.zeros(2)))
    with pytest.raises(ValueError):
        rf.FlowState(ad.constant(np.zeros(2)), 1.2, ad.constant(np.zeros(2)))


# -- trajectory consistency loss --------------------------------------------------------------

def test_trajectory_loss_zero_when_on_target():
    f = nd.Rng(7).normal((2, 5))
    traj = [ad.constant(f.copy()) for _ in range(3)]
    loss = rf.trajectory_consistency_loss(traj, ad.constant(f))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_trajectory_loss_single_point_doubled_target():
    f = nd.Rng(8).normal((1, 6))
    loss = rf.trajectory_consistency_loss([ad.constant(2.0 * f)], ad.constant(f))
    # parallel point: cosine term 0; transition sum empty; target = ||f||^2
    assert loss.item() == pytest.approx(0.5 * (f**2).sum(), rel=1e-9)


def test_trajectory_loss_transition_coefficient():
    # move one interior point along +f: only the transition term changes,
    # and the loss moves by exactly 0.1x that change
    f = np.abs(nd.Rng(9).normal((1, 4))) + 0.5
    states = [0.5 * f, 1.0 * f, 1.0 * f]
    base = rf.trajectory_consistency_loss([ad.constant(s) for s in states], ad.constant(f))
    states2 = [0.5 * f, 2.0 * f, 1.0 * f]
    moved = rf.trajectory_consistency_loss([ad.constant(s) for s in states2], ad.constant(f))
    trans_base = ((states[1] - states[0]) ** 2).sum() + ((states[2] - states[1]) ** 2).sum()
    trans_moved = ((states2[1] - states2[0]) ** 2).sum() + ((states2[2] - states2[1]) ** 2).sum()
    assert moved.item() - base.item() == pytest.approx(0.1 * (trans_moved - trans_base), rel=1e-9)


def test_trajectory_loss_components_nonnegative():
    rng = nd.Rng(10)
    for _ in range(5):
        traj = [ad.constant(rng.normal((2, 4))) for _ in range(3)]
        f = ad.constant(rng.normal((2, 4)))
        assert rf.trajectory_consistency_loss(traj, f).item() >= 0.0


def test_trajectory_loss_empty_error():
    with pytest.raises(ValueError):
        rf.trajectory_consistency_loss([], ad.constant(np.zeros((1, 3))))


def test_trajectory_loss_gradient_fd():
    rng = nd.Rng(11)
    f = ad.constant(rng.normal((2, 4)))
    p1 = ad.Param(rng.normal((2, 4)), "p1")
    p2 = ad.Param(rng.normal((2, 4)), "p2")

    def loss():
        return rf.trajectory_consistency_loss([p1, p2], f)

    report = ad.fd_check(loss, [p1, p2], h=1e-5, tol=1e-4)
    assert report.passed, report.summary()


# -- DDIM baseline ------------------------------------------------------------------------------

class PerfectEpsOracle:
    """Returns the exact noise consistent with a known clean sample."""

    def __init__(self, x0, alpha_bars):
        self.x0 = np.asarray(x0)
        self.alpha_bars = alpha_bars
        self.t_max = len(alpha_bars) - 1

    def forward(self, x, t, c):
        ab = self.alpha_bars[int(t)]
        return ad.constant((x.data - np.sqrt(ab) * self.x0) / np.sqrt(1.0 - ab))


def test_ddim_perfect_oracle_recovers_sample():
    alpha_bars = rf.cosine_alpha_bars(50, max_beta=0.1)
    rng = nd.Rng(12)
    x0 = rng.normal((2, 5))
    z = rng.normal((2, 5))
    oracle = PerfectEpsOracle(x0, alpha_bars)
    for steps in (1, 3, 5):
        out = rf.ddim_baseline_sample(oracle, ad.constant(z), ad.constant(np.zeros((2, 5))),
                                      rf.SamplerConfig(steps, kind=rf.DDIM_BASELINE), alpha_bars)
        np.testing.assert_allclose(out.data, x0, atol=1e-9)


def test_ddim_endpoint_finite_for_random_nets():
    alpha_bars = rf.cosine_alpha_bars(50, max_beta=0.1)
    for seed in range(5):
        rng = nd.Rng(seed)
        net = nn.VelocityPredictor(rng.derive("d"), feature_dim=6, cond_dim=6, t_max=49)
        out = rf.ddim_baseline_sample(net, ad.constant(rng.normal((2, 6))),
                                      ad.constant(rng.normal((2, 6))),
                                      rf.SamplerConfig(3, kind=rf.DDIM_BASELINE), alpha_bars)
        assert np.all(np.isfinite(out.data))


def test_ddim_rejects_wrong_kind():
    alpha_bars = rf.cosine_alpha_bars(50)
    net = ConstantVelocityNet(np.zeros(4))
    with pytest.raises(ValueError):
        rf.ddim_baseline_sample(net, ad.constant(np.zeros((1, 4))),
                                ad.constant(np.zeros((1, 4))),
                                rf.SamplerConfig(2, kind=rf.RECTIFIED_FLOW), alpha_bars)


def test_cosine_schedule_shape():
    ab = rf.cosine_alpha_bars(50, max_beta=0.1)
    assert len(ab) == 50
    assert np.all(np.diff(ab) < 0)  # strictly decreasing
    assert 0.0 < ab[-1] < ab[0] < 1.0


def test_ddim_timesteps_strided():
    taus = rf.ddim_timesteps(50, 4)
    assert taus[0] == 49 and taus[-1] == 0
    assert np.all(np.diff(taus) < 0)
