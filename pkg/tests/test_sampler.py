from __future__ import annotations

import numpy as np
import pytest

import cbgen.diffengine as de
from cbgen.diffusion import make_schedule
from cbgen.energymodel import ConceptAssignment, InterventionSpec, NetConfig, init_network
from cbgen.sampler import (
    SamplerConfig,
    compose,
    descent_update,
    init_latent,
    intervention_grad_batch,
    intervention_step,
    load_trajectory_jsonl,
    run_sampler,
    run_sampler_batch,
    save_trajectory_jsonl,
)
from cbgen.synthworld import make_world


@pytest.fixture(scope="module")
def pieces():
    world = make_world(d=8, seed=0)
    schedule = make_schedule("cosine", T=20)
    flat = init_network(world.spec, NetConfig(d=8, t_scale=20, hidden=16, time_dim=8), seed=0)
    rand = init_network(
        world.spec, NetConfig(d=8, t_scale=20, hidden=16, time_dim=8, head_init="normal"), seed=2
    )
    return world, schedule, flat, rand


class TestInitLatent:
    def test_deterministic(self):
        np.testing.assert_array_equal(init_latent(8, 5), init_latent(8, 5))

    def test_seeds_differ(self):
        assert not np.array_equal(init_latent(8, 1), init_latent(8, 2))

    def test_moments(self):
        V = init_latent(4, 0, n=100_000)
        assert np.all(np.abs(V.mean(axis=0)) <= 3.0 / np.sqrt(100_000))
        assert np.all((V.var(axis=0) > 0.97) & (V.var(axis=0) < 1.03))


class TestComposeBuilders:
    def test_defaults(self, pieces):
        world, *_ = pieces
        spec = compose(world.spec, [("active", "Round", 1), ("negated", "Warm", 1)])
        assert spec.states == ("active", "neutral", "neutral", "negated")
        assert spec.targets == (1, None, None, 1)
        assert spec.w_pos == 1.0 and spec.w_neg == -0.001

    def test_all_active_equals_assignment_semantics(self, pieces):
        world, schedule, flat, rand = pieces
        from cbgen.energymodel import composed_energy, intervention_energy

        spec = compose(world.spec, [("active", k, 1) for k in range(4)])
        v = np.linspace(-1, 1, 8)
        assert intervention_energy(rand, v, 3, spec) == composed_energy(
            rand, v, 3, ConceptAssignment((1, 1, 1, 1))
        )

    def test_duplicate_rejected(self, pieces):
        world, *_ = pieces
        with pytest.raises(ValueError, match="twice"):
            compose(world.spec, [("active", 0, 1), ("negated", 0, 1)])

    def test_empty_rejected(self, pieces):
        world, *_ = pieces
        with pytest.raises(ValueError):
            compose(world.spec, [])

    def test_weight_overrides(self, pieces):
        world, *_ = pieces
        spec = compose(world.spec, [("negated", 1, 1)], w_neg=-0.5)
        assert spec.terms(world.spec) == [(1, 1, -0.5)]


class TestInterventionStep:
    def test_flat_energy_leaves_latent_unchanged(self, pieces):
        world, schedule, flat, _ = pieces
        spec = compose(world.spec, [("active", 0, 1)])
        v = np.linspace(-2, 2, 8)
        out = intervention_step(flat, v, 3, spec, eta=0.1)
        np.testing.assert_array_equal(out, v)

    def test_affine_contract(self, pieces):
        world, schedule, _, rand = pieces
        spec = compose(world.spec, [("active", 0, 1), ("negated", 2, 1)])
        rng = np.random.default_rng(0)
        v = rng.normal(size=8)
        eta = 0.07
        g, _, _ = intervention_grad_batch(rand, v[None, :], 4, spec)
        got = intervention_step(rand, v, 4, spec, eta)
        assert np.max(np.abs(got - (v - eta * g[0]))) <= 1e-15

    def test_quadratic_energy_newton_exact(self):
        # One unit-step descent on E(v) = ||v - mu||^2 / 2 lands exactly on mu.
        mu = np.array([0.5, -1.5, 2.0])
        v = np.array([3.0, 3.0, 3.0])
        g = de.grad_input(
            lambda x: de.mul(0.5, de.tsum(de.square(de.sub(x, de.constant(mu))))), v
        )
        np.testing.assert_array_equal(descent_update(v, g, 1.0), mu)

    def test_descent_probe_on_trained_energy(self, quick_checkpoint):
        net = quick_checkpoint.net
        spec = InterventionSpec.all_active(ConceptAssignment((1, 1, 1, 1)))
        rng = np.random.default_rng(1)
        ok = 0
        for _ in range(100):
            v = rng.normal(size=(1, 8))
            g, e0, _ = intervention_grad_batch(net, v, 30, spec)
            _, e1, _ = intervention_grad_batch(net, descent_update(v, g, 0.005), 30, spec)
            ok += int(e1[0] <= e0[0] + 1e-12)
        assert ok >= 95


class TestRunSampler:
    def test_zero_updates_returns_initial_noise(self, pieces):
        world, schedule, _, rand = pieces
        spec = compose(world.spec, [("active", 0, 1)])
        cfg = SamplerConfig(seed=9, t_end=schedule.T + 1)
        finals, _, _ = run_sampler_batch(rand, schedule, spec, cfg, n=5)
        np.testing.assert_array_equal(finals, init_latent(8, 9, n=5))

    def test_same_seed_identical_trajectories(self, pieces):
        world, schedule, _, rand = pieces
        spec = compose(world.spec, [("active", 1, 1)])
        cfg = SamplerConfig(seed=4)
        t1 = run_sampler(rand, schedule, spec, cfg)
        t2 = run_sampler(rand, schedule, spec, cfg)
        assert len(t1) == len(t2) == schedule.T * cfg.steps_per_timestep + 1
        for p, q in zip(t1.points, t2.points):
            assert p.t == q.t and p.energy == q.energy
            assert p.latent.tobytes() == q.latent.tobytes()

    def test_noise_scale_seeded_reproducibly(self, pieces):
        world, schedule, _, rand = pieces
        spec = compose(world.spec, [("active", 1, 1)])
        cfg = SamplerConfig(seed=4, noise_scale=1.0)
        a, _, _ = run_sampler_batch(rand, schedule, spec, cfg, n=3)
        b, _, _ = run_sampler_batch(rand, schedule, spec, cfg, n=3)
        assert a.tobytes() == b.tobytes()
        c, _, _ = run_sampler_batch(
            rand, schedule, spec, SamplerConfig(seed=5, noise_scale=1.0), n=3
        )
        assert not np.array_equal(a, c)

    def test_builder_order_does_not_change_trajectory(self, pieces):
        world, schedule, _, rand = pieces
        cfg = SamplerConfig(seed=11)
        s1 = compose(world.spec, [("active", 0, 1), ("active", 3, 1)])
        s2 = compose(world.spec, [("active", 3, 1), ("active", 0, 1)])
        a, _, _ = run_sampler_batch(rand, schedule, s1, cfg, n=2)
        b, _, _ = run_sampler_batch(rand, schedule, s2, cfg, n=2)
        assert np.max(np.abs(a - b)) <= 1e-10

    def test_doubling_weights_doubles_gradient(self, pieces):
        world, schedule, _, rand = pieces
        s1 = compose(world.spec, [("active", 0, 1), ("negated", 2, 1)])
        s2 = compose(world.spec, [("active", 0, 1), ("negated", 2, 1)], w_pos=2.0, w_neg=-0.002)
        rng = np.random.default_rng(3)
        V = rng.normal(size=(4, 8))
        g1, _, _ = intervention_grad_batch(rand, V, 5, s1)
        g2, _, _ = intervention_grad_batch(rand, V, 5, s2)
        assert np.max(np.abs(g2 - 2.0 * g1)) <= 1e-12

    def test_gradient_clipping_recorded(self, pieces):
        world, schedule, _, rand = pieces
        boosted = rand.copy()
        for k in range(4):
            boosted.params.assign(
                f"head{k}_w", boosted.params[f"head{k}_w"].value * 1e5
            )
        spec = compose(world.spec, [("active", 0, 1)])
        cfg = SamplerConfig(seed=0, clip_norm=10.0)
        _, _, clipped = run_sampler_batch(boosted, schedule, spec, cfg, n=4)
        assert clipped > 0

    def test_trained_activation_steers_oracle(self, quick_checkpoint, desk_world, desk_schedule):
        from cbgen.evalsuite import concept_accuracy

        spec = compose(desk_world.spec, [("active", 0, 1)])
        finals, _, _ = run_sampler_batch(
            quick_checkpoint.net, desk_schedule, spec, SamplerConfig(seed=21), n=100
        )
        acc = concept_accuracy(desk_world, finals, spec)
        assert acc["per_concept"]["Round"] >= 0.85


class TestTrajectoryExport:
    def test_jsonl_roundtrip(self, pieces, tmp_path):
        world, schedule, _, rand = pieces
        spec = compose(world.spec, [("active", 0, 1), ("negated", 1, 1)])
        traj = run_sampler(rand, schedule, spec, SamplerConfig(seed=8))
        path = tmp_path / "traj.jsonl"
        save_trajectory_jsonl(path, traj)
        records = load_trajectory_jsonl(path)
        assert len(records) == len(traj)
        assert [r["step"] for r in records] == list(range(len(records)))
        ts = [r["t"] for r in records]
        assert ts == sorted(ts, reverse=True)
        np.testing.assert_allclose(records[-1]["latent"], traj.final_latent)
        assert set(records[0]["per_concept"]) == {"Round", "Tilted"}

    def test_trajectory_starts_at_initial_noise(self, pieces):
        world, schedule, _, rand = pieces
        spec = compose(world.spec, [("active", 2, 1)])
        cfg = SamplerConfig(seed=13)
        traj = run_sampler(rand, schedule, spec, cfg)
        np.testing.assert_array_equal(traj.points[0].latent, init_latent(8, 13, n=1)[0])
