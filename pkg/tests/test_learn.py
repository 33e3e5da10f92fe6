import numpy as np
import pytest
import torch

from fluidgn import graph as gr
from fluidgn import learn, net, oracle
from fluidgn.graph import GraphConfig, ObjectKind
from test_graph import make_state


class TestTargetAcceleration:
    def test_uniform_motion_zero(self):
        pos = np.stack([np.array([k * 0.1, 0, 0]) for k in range(7)])
        assert np.allclose(learn.target_acceleration(pos), 0.0, atol=1e-15)

    def test_hand_computed_1d(self):
        window = np.zeros((3, 3))
        window[:, 0] = [0.0, 1.0, 3.0]
        assert learn.target_acceleration(window)[0] == pytest.approx(1.0)

    def test_oracle_free_fall_recovers_gravity(self):
        cfg = oracle.PbdConfig(settle_steps=0)
        floor = oracle.make_container("floor_plane", {"size_x": 4, "size_y": 4})
        body = oracle.RigidBody.make(floor, ObjectKind.STATIONARY)
        pos = np.array([[0.0, 0.0, 2.0]])
        vel = np.zeros((1, 3))
        frames = [pos.copy()]
        for _ in range(30):
            pos, vel = oracle.pbd_step(pos, vel, cfg, [body], [body.pose])
            frames.append(pos.copy())
        traj = np.concatenate(frames, axis=0)
        accels = [learn.target_acceleration(traj[k - 2 : k + 1]) for k in range(2, 31)]
        az = np.array([a[2] for a in accels])
        expected = -9.81 * cfg.dt**2
        assert np.abs(az - expected).max() / abs(expected) < 0.01


class TestInjectNoise:
    def test_zero_sigma_identity(self, rng):
        state = make_state(rng, n=8)
        noisy, corr = learn.inject_noise(state, 0.0, rng)
        assert noisy is state
        assert np.all(corr == 0)

    def test_final_frame_std(self):
        # two-frame window (one step): final perturbation std is sigma exactly
        rng = np.random.default_rng(0)
        sigma = 0.01
        hist = np.zeros((100_000, 2, 3))
        incr = rng.normal(0.0, sigma / 1.0, size=(100_000, 1, 3))
        walk = np.concatenate([np.zeros((100_000, 1, 3)), np.cumsum(incr, axis=1)], axis=1)
        measured = walk[:, -1].std()
        assert abs(measured - sigma) / sigma < 0.03

    def test_window_noise_statistics(self, rng):
        state = make_state(rng, n=30_000, spread=0.0, motion=0.0)
        sigma = 6.7e-4
        noisy, corr = learn.inject_noise(state, sigma, np.random.default_rng(7))
        delta = noisy.particle_history - state.particle_history
        assert np.all(delta[:, 0] == 0.0)  # oldest frame clean
        final_std = delta[:, -1].std()
        assert abs(final_std - sigma) / sigma < 0.03
        assert np.allclose(corr, -2 * delta[:, -1] + delta[:, -2])

    def test_seeded_determinism(self, rng):
        state = make_state(rng, n=10)
        a, ca = learn.inject_noise(state, 1e-3, np.random.default_rng(42))
        b, cb = learn.inject_noise(state, 1e-3, np.random.default_rng(42))
        assert np.array_equal(a.particle_history, b.particle_history)
        assert np.array_equal(ca, cb)

    def test_poses_untouched(self, rng):
        state = make_state(rng, n=10)
        noisy, _ = learn.inject_noise(state, 1e-3, np.random.default_rng(1))
        assert noisy.object_translations is state.object_translations
        assert noisy.object_quats is state.object_quats


class TestLrSchedule:
    def test_endpoints(self):
        cfg = learn.TrainConfig()
        assert learn.lr_at(0, cfg) == pytest.approx(1e-4)
        assert learn.lr_at(cfg.max_steps, cfg) == pytest.approx(1e-6)

    def test_geometric_midpoint(self):
        cfg = learn.TrainConfig()
        assert learn.lr_at(cfg.max_steps // 2, cfg) == pytest.approx(1e-5, rel=1e-6)

    def test_strictly_decreasing(self):
        cfg = learn.TrainConfig(max_steps=1000)
        values = [learn.lr_at(s, cfg) for s in range(0, 1001, 50)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            learn.TrainConfig(lr_start=1e-6, lr_end=1e-4)


class TestNormStats:
    def test_roundtrip(self, rng):
        ns = learn.NormStats({"f": 4})
        ns.accumulate("f", rng.normal(2.0, 3.0, size=(500, 4)))
        ns.freeze()
        x = rng.normal(size=(50, 4))
        assert np.abs(ns.denormalize("f", ns.normalize("f", x)) - x).max() < 1e-6

    def test_tensor_matches_numpy(self, rng):
        ns = learn.NormStats({"f": 3})
        ns.accumulate("f", rng.normal(1.0, 2.0, size=(200, 3)))
        ns.freeze()
        x = rng.normal(size=(20, 3))
        a = ns.normalize("f", x)
        b = ns.normalize_tensor("f", torch.as_tensor(x)).numpy()
        assert np.abs(a - b).max() < 1e-12

    def test_std_floor(self):
        ns = learn.NormStats({"f": 2})
        ns.accumulate("f", np.ones((100, 2)))
        ns.freeze()
        assert np.all(ns.std["f"] == learn.STD_FLOOR)
        assert np.all(ns.normalize("f", np.ones((5, 2))) == 0.0)

    def test_frozen_rejects_accumulate(self, rng):
        ns = learn.NormStats({"f": 2})
        ns.accumulate("f", rng.normal(size=(10, 2)))
        ns.freeze()
        with pytest.raises(RuntimeError):
            ns.accumulate("f", rng.normal(size=(10, 2)))

    def test_serialization_roundtrip(self, rng):
        ns = learn.NormStats({"a": 3, "b": 5})
        ns.accumulate("a", rng.normal(size=(50, 3)))
        ns.accumulate("b", rng.normal(size=(70, 5)))
        ns.freeze()
        back = learn.NormStats.from_tensors(
            {k: np.asarray(v, dtype="<f4") for k, v in ns.state_tensors().items()}
        )
        assert back.frozen
        assert np.abs(back.mean["a"] - ns.mean["a"]).max() < 1e-6
        assert np.abs(back.std["b"] - ns.std["b"]).max() < 1e-6
        assert back.count["b"] == 70

    def test_welford_matches_batch_stats(self, rng):
        data = rng.normal(3.0, 0.7, size=(400, 6))
        ns = learn.NormStats({"f": 6})
        for chunk in np.array_split(data, 7):
            ns.accumulate("f", chunk)
        ns.freeze()
        assert np.abs(ns.mean["f"] - data.mean(axis=0)).max() < 1e-10
        assert np.abs(ns.std["f"] - data.std(axis=0)).max() < 1e-10


def tiny_setup(rng, n_particles=12, steps_kind="still"):
    spec = oracle.ScenarioSpec(kind=steps_kind, num_frames=20, seed=3, n_particles=n_particles)
    traj, meshes, _ = oracle.generate_scenario(spec)
    from fluidgn.sim import Episode

    ep = Episode.from_trajectory(traj, meshes)
    gcfg = GraphConfig()
    tcfg = learn.TrainConfig(max_steps=5000, batch_size=1, seed=0, norm_sample_windows=10)
    params = net.ModelParams(
        net.NetConfig(num_blocks=1, latent=16, hidden=16),
        net.FeatureDims.from_graph_config(gcfg),
        seed=1,
    )
    norm = learn.build_norm_stats([ep], gcfg, tcfg)
    return ep, gcfg, tcfg, params, norm


class TestAdam:
    def test_zero_gradient_leaves_parameters(self, rng):
        _, _, _, params, _ = tiny_setup(rng)
        adam = learn.AdamState.for_params(params)
        before = adam.flat_param.clone()
        zero_grads = {n: torch.zeros_like(t) for n, t in zip(*params.parameter_list())}
        learn.adam_step(params, zero_grads, adam, lr=1e-3)
        assert torch.equal(adam.flat_param, before)
        assert adam.step == 1

    def test_single_step_matches_reference(self, rng):
        _, _, _, params, _ = tiny_setup(rng)
        adam = learn.AdamState.for_params(params)
        names, tensors = params.parameter_list()
        grads = {n: torch.ones_like(t) for n, t in zip(names, tensors)}
        before = {n: t.detach().clone() for n, t in zip(names, tensors)}
        learn.adam_step(params, grads, adam, lr=0.01)
        # bias-corrected first step with g=1: update = -lr * 1 / (1 + eps)
        expected = 0.01 * 1.0 / (1.0 + 1e-8)
        for n, t in zip(names, tensors):
            assert torch.allclose(before[n] - t.detach(), torch.full_like(t, expected),
                                  atol=1e-9)

    def test_moment_views_alias_flat(self, rng):
        _, _, _, params, _ = tiny_setup(rng)
        adam = learn.AdamState.for_params(params)
        adam.flat_m.fill_(0.5)
        assert all(torch.all(v == 0.5) for v in adam.m.values())


class TestTrainStep:
    def test_zero_model_zero_targets(self, rng):
        ep, gcfg, tcfg, params, norm = tiny_setup(rng)
        with torch.no_grad():
            for lin in params.decoder.linears:
                lin.weight.zero_()
                lin.bias.zero_()
        norm.mean["accel"][:] = 0.0
        norm.std["accel"][:] = 1.0
        sample = learn.episode_window(ep, 6)
        graph = gr.build_graph(sample.state, gcfg)
        target = np.zeros((ep.positions.shape[1], 3))
        adam = learn.AdamState.for_params(params)
        loss = learn.train_step([(graph, target)], params, adam, norm, tcfg)
        assert loss == 0.0

    def test_requires_frozen_norm(self, rng):
        ep, gcfg, tcfg, params, _ = tiny_setup(rng)
        raw = learn.NormStats.for_model(gcfg)
        sample = learn.episode_window(ep, 6)
        graph = gr.build_graph(sample.state, gcfg)
        adam = learn.AdamState.for_params(params)
        with pytest.raises(RuntimeError, match="frozen"):
            learn.train_step([(graph, np.zeros((12, 3)))], params, adam, raw, tcfg)

    def test_overfit_single_sample(self, rng):
        ep, gcfg, tcfg, params, norm = tiny_setup(rng)
        sample = learn.episode_window(ep, 8)
        graph = gr.build_graph(sample.state, gcfg)
        target = learn.target_acceleration(
            np.concatenate([sample.state.particle_history, sample.next_positions[:, None]],
                           axis=1)
        )
        adam = learn.AdamState.for_params(params)
        losses = [
            learn.train_step([(graph, target)], params, adam, norm, tcfg)
            for _ in range(5000)
        ]
        assert min(losses[-100:]) < 1e-2 * losses[0]

    def test_seeded_determinism(self, rng):
        ep, gcfg, tcfg, params, norm = tiny_setup(rng)

        def run():
            p = net.ModelParams(
                net.NetConfig(num_blocks=1, latent=16, hidden=16),
                net.FeatureDims.from_graph_config(gcfg), seed=1,
            )
            adam = learn.AdamState.for_params(p)
            _, rows = learn.train_loop([ep], p, norm, gcfg, tcfg, steps=25, adam=adam)
            return [r[1] for r in rows], p

        losses_a, params_a = run()
        losses_b, params_b = run()
        assert losses_a == losses_b
        for (na, a), (nb, b) in zip(params_a.named_parameters(), params_b.named_parameters()):
            assert torch.equal(a, b), na

    def test_divergence_detection(self, rng):
        ep, gcfg, tcfg, params, norm = tiny_setup(rng)
        sample = learn.episode_window(ep, 6)
        graph = gr.build_graph(sample.state, gcfg)
        target = np.full((ep.positions.shape[1], 3), np.inf)
        adam = learn.AdamState.for_params(params)
        with pytest.raises(learn.TrainingDiverged, match="diverged"):
            learn.train_step([(graph, target)], params, adam, norm, tcfg)


class TestNormalizedTargets:
    def test_target_stats_near_standard(self, rng):
        ep, gcfg, tcfg, _, norm = tiny_setup(rng, n_particles=27)
        sampled = []
        rng2 = np.random.default_rng(0)
        for t in range(5, 18):
            sample = learn.episode_window(ep, t)
            noisy, _ = learn.inject_noise(sample.state, tcfg.noise_sigma, rng2)
            target = learn.target_acceleration(
                np.concatenate([noisy.particle_history, sample.next_positions[:, None]], axis=1)
            )
            sampled.append(norm.normalize("accel", target))
        z = np.concatenate(sampled)
        assert np.abs(z.mean(axis=0)).max() < 0.35
        assert 0.5 < z.std(axis=0).min() and z.std(axis=0).max() < 1.6
