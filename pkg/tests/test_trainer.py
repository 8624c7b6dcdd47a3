import numpy as np
import pytest

from madpde import grf, network, problems, trainer
from madpde.grf import BURGERS_GRF, LAPLACE_GRF
from madpde.problems import BurgersTask, LaplaceTriangleTask, OdeShiftTask
from madpde.trainer import AdamState, TrainConfig


def cfg_with(**kw):
    base = dict(lr0=1e-3, total_iters=100, M_r=8, M_bc=4, lambda_bc=1.0,
                inv_sigma2=0.0, eval_every=10, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def make_task(variant, seed=0):
    rng = np.random.default_rng(seed)
    if variant == "ode_shift":
        return OdeShiftTask(0.8)
    if variant == "burgers":
        return BurgersTask(grf.sample_grf(BURGERS_GRF, rng), 0.01)
    angles = np.sort(rng.uniform(0, 2 * np.pi, 3))
    return LaplaceTriangleTask(tuple(angles), grf.sample_grf(LAPLACE_GRF, rng))


def net_for(task, latent_dim=4):
    return problems.network_config_for(task, latent_dim=latent_dim,
                                       hidden_layers=3, width=16,
                                       first_layer_omega=6.0)


class TestLrSchedule:
    def test_milestones(self):
        cfg = cfg_with(total_iters=1000, lr0=1e-3)
        assert trainer.lr_at(cfg, 100) == pytest.approx(1e-3)
        assert trainer.lr_at(cfg, 399) == pytest.approx(1e-3)
        assert trainer.lr_at(cfg, 400) == pytest.approx(5e-4)
        assert trainer.lr_at(cfg, 600) == pytest.approx(2.5e-4)
        assert trainer.lr_at(cfg, 900) == pytest.approx(1.25e-4)

    def test_out_of_range(self):
        cfg = cfg_with(total_iters=10)
        with pytest.raises(ValueError):
            trainer.lr_at(cfg, 10)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        state = AdamState.zeros(3)
        x = np.zeros(3)
        g = np.array([10.0, -0.01, 3.0])
        state, x = trainer.adam_step(state, x, g, lr=0.1)
        np.testing.assert_allclose(x, -0.1 * np.sign(g), rtol=1e-6)

    def test_zero_gradient_keeps_vars(self):
        state = AdamState.zeros(2)
        x = np.array([1.0, -2.0])
        for _ in range(5):
            state, x = trainer.adam_step(state, x, np.zeros(2), lr=0.1)
        np.testing.assert_array_equal(x, [1.0, -2.0])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            state = AdamState.zeros(4)
            x = np.ones(4)
            for _ in range(20):
                state, x = trainer.adam_step(state, x, rng.normal(size=4), 1e-2)
            return x
        np.testing.assert_array_equal(run(), run())

    def test_nonfinite_gradient_reports_block(self):
        state = AdamState.zeros(4)
        g = np.array([0.0, np.nan, 0.0, 0.0])
        with pytest.raises(trainer.TrainingError, match=r"bias\[0\]"):
            trainer.adam_step(state, np.zeros(4), g, 1e-3,
                              blocks=[("weight", 0, 1), ("bias", 1, 4)])

    def test_clip_gradient(self):
        g = np.array([3.0, 4.0])
        np.testing.assert_allclose(trainer.clip_gradient(g, 1.0),
                                   np.array([0.6, 0.8]))
        assert trainer.clip_gradient(g, None) is g


class TestAssembleLoss:
    @pytest.mark.parametrize("variant", ["ode_shift", "burgers", "laplace_triangle"])
    def test_breakdown_identity(self, variant):
        task = make_task(variant)
        cfg = cfg_with(inv_sigma2=1e-3, lambda_bc=1.7)
        net_cfg = net_for(task)
        params = network.init_siren(net_cfg, 0)
        z = np.random.default_rng(1).normal(size=4) * 0.1
        batch = problems.sample_batch(task, cfg.M_r, cfg.M_bc,
                                      np.random.default_rng(2))
        out = trainer.assemble_loss(task, params, z, batch, cfg)
        b = out.breakdown
        assert b.total == pytest.approx(
            b.residual + cfg.lambda_bc * b.boundary + b.reg, rel=1e-15)
        assert b.residual >= 0 and b.boundary >= 0 and b.reg >= 0

    def test_reg_off_when_zero(self):
        task = make_task("ode_shift")
        cfg = cfg_with(inv_sigma2=0.0)
        params = network.init_siren(net_for(task), 0)
        batch = problems.sample_batch(task, 8, 2, np.random.default_rng(0))
        out = trainer.assemble_loss(task, params, np.ones(4), batch, cfg)
        assert out.breakdown.reg == 0.0

    def test_residual_scales_quadratically(self):
        # doubling the field doubles every pointwise ODE residual when the
        # forcing is removed -> residual term x4
        task = OdeShiftTask(0.0)
        cfg = cfg_with()
        net_cfg = net_for(task, latent_dim=0)
        params = network.init_siren(net_cfg, 3)
        batch = problems.sample_batch(task, 16, 2, np.random.default_rng(0))
        zero_forcing = problems.ode_forcing(task.eta, batch.interior[:, :1]) * 0

        from madpde import diffcore as dc
        from madpde.network import jet_forward, stage_network

        def residual_term(scale):
            tape = trainer.Tape()
            staged = stage_network(tape, params, trainable=False)
            jets = jet_forward(staged, batch.interior, None, [0], {0: 1})
            r = dc.sub(dc.mul(scale, jets[0].d1), zero_forcing)
            return float(dc.value_of(dc.vmean(dc.mul(r, r))))

        assert residual_term(2.0) == pytest.approx(4 * residual_term(1.0), rel=1e-12)

    def test_exact_solution_surrogate_near_zero_loss(self):
        # inject the ODE oracle via a wide sine net fit is overkill; instead
        # check that the loss vanishes when residual and boundary do: use the
        # degenerate zero-forcing task eta such that u == 0 solves it.
        task = OdeShiftTask(0.0)
        cfg = cfg_with(M_r=32)
        net_cfg = net_for(task, latent_dim=0)
        params = network.ModelParams(np.zeros(network.param_count(net_cfg)), net_cfg)
        batch = problems.sample_batch(task, 32, 2, np.random.default_rng(0))
        out = trainer.assemble_loss(task, params, None, batch, cfg)
        # u == 0: residual = forcing^2 mean, boundary = targets^2 mean
        forcing = problems.ode_forcing(0.0, batch.interior[:, 0])
        assert out.breakdown.residual == pytest.approx(np.mean(forcing ** 2), rel=1e-12)
        assert out.breakdown.boundary == pytest.approx(
            np.mean(batch.boundary_values ** 2), rel=1e-12)

    def test_empty_batch_rejected(self):
        task = make_task("ode_shift")
        params = network.init_siren(net_for(task), 0)
        batch = problems.SampleBatch(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0))
        with pytest.raises(trainer.TrainingError):
            trainer.assemble_loss(task, params, np.zeros(4), batch, cfg_with())

    @pytest.mark.parametrize("variant", ["ode_shift", "burgers", "laplace_triangle"])
    def test_gradients_match_finite_differences(self, variant):
        task = make_task(variant, seed=4)
        cfg = cfg_with(inv_sigma2=1e-3)
        net_cfg = net_for(task)
        params = network.init_siren(net_cfg, 7)
        rng = np.random.default_rng(8)
        z = rng.normal(size=4) * 0.2
        batch = problems.sample_batch(task, 8, 4, np.random.default_rng(9))

        out = trainer.assemble_loss(task, params, z, batch, cfg)
        g_theta, g_z = out.gradients()
        g_z = g_z.ravel()

        def loss_at(flat, zvec):
            p = network.ModelParams(flat, net_cfg)
            return trainer.assemble_loss(task, p, zvec, batch, cfg).breakdown.total

        h = 1e-5
        idx = rng.choice(params.flat.size, size=60, replace=False)
        for i in idx:
            fp = params.flat.copy(); fp[i] += h
            fm = params.flat.copy(); fm[i] -= h
            fd = (loss_at(fp, z) - loss_at(fm, z)) / (2 * h)
            denom = max(abs(fd), 1e-8)
            assert abs(g_theta[i] - fd) / denom <= 1e-4, f"param {i}"
        for i in range(4):
            zp = z.copy(); zp[i] += h
            zm = z.copy(); zm[i] -= h
            fd = (loss_at(params.flat, zp) - loss_at(params.flat, zm)) / (2 * h)
            denom = max(abs(fd), 1e-8)
            assert abs(g_z[i] - fd) / denom <= 1e-4, f"latent {i}"

    def test_multitask_matches_sum_of_singles(self):
        tasks = [OdeShiftTask(0.1), OdeShiftTask(0.9), OdeShiftTask(1.7)]
        cfg = cfg_with(inv_sigma2=1e-3, M_r=16, M_bc=2)
        net_cfg = net_for(tasks[0], latent_dim=2)
        params = network.init_siren(net_cfg, 5)
        rng = np.random.default_rng(6)
        Z = rng.normal(size=(3, 2))
        batches = [problems.sample_batch(t, 16, 2, np.random.default_rng(i))
                   for i, t in enumerate(tasks)]
        multi = trainer.assemble_multitask_loss(tasks, batches, params, Z, cfg)
        singles = [trainer.assemble_loss(t, params, Z[i], batches[i], cfg)
                   for i, t in enumerate(tasks)]
        assert multi.breakdown.total == pytest.approx(
            sum(s.breakdown.total for s in singles), rel=1e-12)
        np.testing.assert_allclose(multi.per_task_loss,
                                   [s.breakdown.total for s in singles], rtol=1e-12)

    def test_frozen_theta_has_no_theta_gradient(self):
        task = make_task("ode_shift")
        cfg = cfg_with()
        params = network.init_siren(net_for(task), 0)
        batch = problems.sample_batch(task, 8, 2, np.random.default_rng(0))
        out = trainer.assemble_loss(task, params, np.zeros(4), batch, cfg,
                                    trainable_theta=False)
        g_theta, g_z = out.gradients()
        assert g_theta is None
        assert g_z is not None
