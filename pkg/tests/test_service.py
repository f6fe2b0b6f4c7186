from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from cbgen.checkpoint import Checkpoint
from cbgen.diffusion import make_schedule
from cbgen.energymodel import NetConfig, init_network
from cbgen.sampler import SamplerConfig, compose, intervention_grad_batch, run_sampler_batch
from cbgen.service import start_server
from cbgen.synthworld import make_world


def _request(base, path, body=None, method=None):
    url = base + path
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(
        url, data=data, method=method or ("POST" if body is not None else "GET")
    )
    if data is not None:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=60) as resp:
            return resp.status, dict(resp.headers), resp.read()
    except urllib.error.HTTPError as e:
        return e.code, dict(e.headers), e.read()


@pytest.fixture(scope="module")
def servers():
    world = make_world(d=8, seed=0)
    schedule = make_schedule("cosine", T=10)
    flat = init_network(world.spec, NetConfig(d=8, t_scale=10, hidden=12, time_dim=8), seed=0)
    rand = init_network(
        world.spec, NetConfig(d=8, t_scale=10, hidden=12, time_dim=8, head_init="normal"), seed=1
    )
    flat_ckpt = Checkpoint(net=flat, schedule=schedule, world=world, step=0)
    rand_ckpt = Checkpoint(net=rand, schedule=schedule, world=world, step=5)

    s1, t1 = start_server(flat_ckpt, "flathash" + "0" * 56, port=0)
    s2, t2 = start_server(rand_ckpt, "randhash" + "0" * 56, port=0)
    base1 = f"http://127.0.0.1:{s1.server_address[1]}"
    base2 = f"http://127.0.0.1:{s2.server_address[1]}"
    yield {"flat": (base1, flat_ckpt), "rand": (base2, rand_ckpt)}
    s1.shutdown(), s2.shutdown()
    s1.server_close(), s2.server_close()


class TestHealthAndInfo:
    def test_health(self, servers):
        base, _ = servers["flat"]
        status, headers, body = _request(base, "/health")
        assert status == 200
        assert json.loads(body)["status"] == "ok"
        assert headers["X-Checkpoint-Hash"].startswith("flathash")

    def test_untrained_flagged_in_info(self, servers):
        base, _ = servers["flat"]
        _, _, body = _request(base, "/info")
        info = json.loads(body)
        assert info["status"] == "untrained"
        assert info["trained"] is False
        assert info["K"] == 4

    def test_trained_flagged(self, servers):
        base, _ = servers["rand"]
        _, _, body = _request(base, "/info")
        assert json.loads(body)["status"] == "trained"


class TestConcepts:
    def test_lists_all_concepts_with_default_weights(self, servers):
        base, _ = servers["flat"]
        status, headers, body = _request(base, "/concepts")
        payload = json.loads(body)
        assert status == 200
        assert len(payload["concepts"]) == 4
        assert all(c["cardinality"] == 2 for c in payload["concepts"])
        assert payload["default_weights"] == {"activate": 1.0, "negate": -0.001}
        assert headers["ETag"]

    def test_etag_stable_across_calls(self, servers):
        base, _ = servers["flat"]
        _, h1, b1 = _request(base, "/concepts")
        _, h2, b2 = _request(base, "/concepts")
        assert h1["ETag"] == h2["ETag"]
        assert b1 == b2


class TestSample:
    def test_deterministic_bodies(self, servers):
        base, _ = servers["rand"]
        req = {
            "interventions": [{"concept": "Round", "state": "active", "value": 1}],
            "seed": 11,
        }
        s1, _, b1 = _request(base, "/sample", req)
        s2, _, b2 = _request(base, "/sample", req)
        assert s1 == s2 == 200
        assert b1 == b2

    def test_matches_direct_sampler_run(self, servers):
        base, ckpt = servers["rand"]
        req = {
            "interventions": [
                {"concept": "Round", "state": "active", "value": 1},
                {"concept": "Warm", "state": "negated", "value": 1},
            ],
            "seed": 3,
        }
        _, _, body = _request(base, "/sample", req)
        got = json.loads(body)["final_latent"]
        spec = compose(ckpt.world.spec, [("active", 0, 1), ("negated", 3, 1)])
        finals, _, _ = run_sampler_batch(
            ckpt.net, ckpt.schedule, spec, SamplerConfig(seed=3), n=1
        )
        np.testing.assert_allclose(got, finals[0], rtol=0, atol=0)

    def test_scores_sum_to_one(self, servers):
        base, _ = servers["rand"]
        _, _, body = _request(
            base, "/sample", {"interventions": [{"concept": "Tilted", "state": "active"}], "seed": 0}
        )
        payload = json.loads(body)
        for probs in payload["concept_scores"].values():
            assert abs(sum(probs) - 1.0) <= 1e-9

    def test_unknown_concept_400(self, servers):
        base, _ = servers["flat"]
        status, _, body = _request(
            base, "/sample", {"interventions": [{"concept": "Nope", "state": "active"}]}
        )
        assert status == 400
        assert "Round" in json.loads(body)["error"]

    def test_all_neutral_422(self, servers):
        base, _ = servers["flat"]
        status, _, _ = _request(base, "/sample", {"interventions": [], "seed": 0})
        assert status == 422

    def test_trajectory_endpoints(self, servers):
        base, ckpt = servers["rand"]
        req = {
            "interventions": [{"concept": "Large", "state": "active", "value": 1}],
            "seed": 8,
            "return_trajectory": True,
        }
        _, _, body = _request(base, "/sample", req)
        payload = json.loads(body)
        traj = payload["trajectory"]
        assert len(traj) <= 512
        np.testing.assert_allclose(traj[-1]["latent"], payload["final_latent"])
        from cbgen.sampler import init_latent

        np.testing.assert_allclose(traj[0]["latent"], init_latent(8, 8, n=1)[0])

    def test_concurrent_requests_deterministic_per_seed(self, servers):
        base, _ = servers["rand"]
        results = {}

        def hit(seed):
            _, _, body = _request(
                base,
                "/sample",
                {"interventions": [{"concept": "Round", "state": "active"}], "seed": seed},
            )
            results[seed] = json.loads(body)["final_latent"]

        threads = [threading.Thread(target=hit, args=(s,)) for s in (1, 2, 3, 1, 2, 3)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        # rerun serially and compare
        for seed in (1, 2, 3):
            _, _, body = _request(
                base,
                "/sample",
                {"interventions": [{"concept": "Round", "state": "active"}], "seed": seed},
            )
            assert results[seed] == json.loads(body)["final_latent"]


class TestEnergyGrid:
    def test_constant_energy_grid(self, servers):
        base, _ = servers["flat"]
        status, _, body = _request(
            base,
            "/energy_grid",
            {
                "t": 2,
                "resolution": 5,
                "interventions": [{"concept": "Round", "state": "active"}],
            },
        )
        assert status == 200
        grid = np.array(json.loads(body)["values"])
        assert grid.shape == (5, 5)
        assert np.allclose(grid, grid[0, 0])

    def test_matches_pointwise_energy(self, servers):
        base, ckpt = servers["rand"]
        body_req = {
            "t": 3,
            "resolution": 3,
            "extent": 2.0,
            "interventions": [{"concept": "Round", "state": "active", "value": 1}],
        }
        _, _, body = _request(base, "/energy_grid", body_req)
        grid = np.array(json.loads(body)["values"])
        spec = compose(ckpt.world.spec, [("active", 0, 1)])
        coords = np.linspace(-2, 2, 3)
        for i, u in enumerate(coords):
            for j, w in enumerate(coords):
                v = np.zeros(8)
                v[0], v[1] = u, w
                _, e, _ = intervention_grad_batch(ckpt.net, v[None, :], 3, spec)
                assert abs(grid[i, j] - e[0]) <= 1e-12

    def test_resolution_one(self, servers):
        base, _ = servers["flat"]
        _, _, body = _request(
            base,
            "/energy_grid",
            {"t": 1, "resolution": 1, "interventions": [{"concept": "Round", "state": "active"}]},
        )
        assert np.array(json.loads(body)["values"]).shape == (1, 1)

    def test_resolution_cap(self, servers):
        base, _ = servers["flat"]
        status, _, _ = _request(
            base,
            "/energy_grid",
            {"t": 1, "resolution": 300, "interventions": [{"concept": "Round", "state": "active"}]},
        )
        assert status == 400


class TestProtocol:
    def test_unknown_endpoint_404(self, servers):
        base, _ = servers["flat"]
        status, _, _ = _request(base, "/nope")
        assert status == 404

    def test_malformed_json_400(self, servers):
        base, _ = servers["flat"]
        req = urllib.request.Request(
            base + "/sample", data=b"{broken", method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=10) as resp:
                status = resp.status
        except urllib.error.HTTPError as e:
            status = e.code
        assert status == 400

    def test_responses_carry_checkpoint_hash(self, servers):
        base, _ = servers["rand"]
        for path, body in (("/health", None), ("/concepts", None)):
            _, headers, raw = _request(base, path, body)
            assert headers["X-Checkpoint-Hash"].startswith("randhash")
            assert json.loads(raw)["checkpoint_hash"].startswith("randhash")
