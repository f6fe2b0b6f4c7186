"""JSON-over-HTTP playground API.

Endpoints (HTTP/1.1, JSON bodies, UTF-8):

    GET  /health        liveness
    GET  /info          checkpoint hash, step counter, world summary
    GET  /concepts      concept spec + default intervention weights (ETag)
    POST /sample        run an intervention sampling request
    POST /energy_grid   intervention energies over a 2-D latent plane

Model parameters are loaded once into an immutable snapshot; requests never
mutate them, so they execute concurrently and commute.  Every response
carries the checkpoint hash (body field and X-Checkpoint-Hash header).
Per-request wall time travels in the X-Elapsed-Ms header so that identical
requests produce byte-identical bodies.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .checkpoint import Checkpoint
from .energymodel import (
    ACTIVE,
    NEGATED,
    W_ACTIVATE_DEFAULT,
    W_NEGATE_DEFAULT,
    InterventionSpec,
    predict_concepts,
)
from .sampler import SamplerConfig, intervention_grad_batch, run_sampler_batch
from .synthworld import GLYPH_ATTRIBUTES, glyph_attributes, oracle_label_batch

MAX_GRID_RESOLUTION = 256
MAX_TRAJECTORY_POINTS = 512


class RequestError(ValueError):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class PlaygroundService:
    """Stateless request handlers around one immutable checkpoint snapshot."""

    def __init__(self, ckpt: Checkpoint, ckpt_hash: str):
        if ckpt.world is None:
            raise ValueError("service needs a checkpoint with an embedded world config")
        self.ckpt = ckpt
        self.ckpt_hash = ckpt_hash
        self.world = ckpt.world
        self._concepts_payload = {
            "concepts": [
                {"index": k, "name": name, "cardinality": card}
                for k, (name, card) in enumerate(
                    zip(self.world.spec.names, self.world.spec.cardinalities)
                )
            ],
            "default_weights": {
                "activate": W_ACTIVATE_DEFAULT,
                "negate": W_NEGATE_DEFAULT,
            },
            "checkpoint_hash": ckpt_hash,
        }
        body = _dump(self._concepts_payload)
        self._concepts_etag = '"' + hashlib.sha256(body).hexdigest()[:32] + '"'

    # -- GET ---------------------------------------------------------------

    def health(self) -> dict:
        return {"status": "ok", "checkpoint_hash": self.ckpt_hash}

    def info(self) -> dict:
        return {
            "checkpoint_hash": self.ckpt_hash,
            "step": self.ckpt.step,
            "trained": self.ckpt.trained,
            "status": "trained" if self.ckpt.trained else "untrained",
            "d": self.world.d,
            "K": self.world.spec.K,
            "schedule": self.ckpt.schedule.to_manifest(),
            "concept_names": list(self.world.spec.names),
        }

    def concepts(self) -> tuple[dict, str]:
        return self._concepts_payload, self._concepts_etag

    # -- POST /sample --------------------------------------------------------

    def _parse_interventions(self, raw) -> InterventionSpec:
        spec = self.world.spec
        if not isinstance(raw, list):
            raise RequestError(400, "interventions must be a list")
        states = ["neutral"] * spec.K
        targets: list[int | None] = [None] * spec.K
        weights: list[float | None] = [None] * spec.K
        seen = set()
        for entry in raw:
            name = entry.get("concept")
            try:
                k = spec.index_of(name)
            except KeyError:
                raise RequestError(
                    400,
                    f"unknown concept {name!r}; valid: {', '.join(spec.names)}",
                )
            if k in seen:
                raise RequestError(400, f"concept {name!r} listed twice")
            seen.add(k)
            state = entry.get("state", ACTIVE)
            if state not in (ACTIVE, NEGATED, "neutral"):
                raise RequestError(400, f"unknown intervention state {state!r}")
            states[k] = state
            if state != "neutral":
                targets[k] = int(entry.get("value", 1))
                if not (0 <= targets[k] < spec.cardinalities[k]):
                    raise RequestError(400, f"value {targets[k]} invalid for {name!r}")
                if entry.get("weight") is not None:
                    weights[k] = float(entry["weight"])
        if all(s == "neutral" for s in states):
            raise RequestError(422, "all-neutral intervention: nothing to compose")
        return InterventionSpec(
            states=tuple(states), targets=tuple(targets), weight_overrides=tuple(weights)
        )

    def sample(self, body: dict) -> dict:
        spec = self._parse_interventions(body.get("interventions", []))
        seed = int(body.get("seed", 0))
        overrides = {}
        if body.get("steps") is not None:
            overrides["steps_per_timestep"] = int(body["steps"])
        if body.get("eta") is not None:
            overrides["eta"] = float(body["eta"])
        if body.get("noise_scale") is not None:
            overrides["noise_scale"] = float(body["noise_scale"])
        try:
            cfg = SamplerConfig(seed=seed, **overrides)
        except ValueError as e:
            raise RequestError(400, str(e))

        net, schedule, world = self.ckpt.net, self.ckpt.schedule, self.world
        want_traj = bool(body.get("return_trajectory", False))
        try:
            finals, records, clipped = run_sampler_batch(
                net, schedule, spec, cfg, n=1, record=want_traj
            )
        except FloatingPointError as e:
            raise RequestError(500, f"non-finite gradient: {e}")

        v = finals[0]
        names = world.spec.names
        attrs = glyph_attributes(world, v[None, :])[0]
        scores = {
            names[k]: [float(p) for p in probs]
            for k, probs in enumerate(predict_concepts(net, v, cfg.t_end))
        }
        _, e_final, per_final = intervention_grad_batch(net, v[None, :], cfg.t_end, spec)
        out = {
            "final_latent": [float(x) for x in v],
            "glyph": {
                name: float(attrs[i]) for i, name in enumerate(GLYPH_ATTRIBUTES)
            },
            "concept_scores": scores,
            "per_concept_energy": {
                names[k]: float(vals[0]) for k, vals in per_final.items()
            },
            "intervention_energy": float(e_final[0]),
            "oracle_labels": {
                names[k]: int(label)
                for k, label in enumerate(oracle_label_batch(world, v[None, :])[0])
            },
            "clipped_updates": clipped,
            "seed": seed,
            "checkpoint_hash": self.ckpt_hash,
        }
        if want_traj:
            pts = [
                {
                    "t": int(t),
                    "latent": [float(x) for x in V[0]],
                    "energy": float(e[0]),
                    "per_concept": {names[k]: float(vals[0]) for k, vals in per.items()},
                }
                for t, V, e, per in records
            ]
            if len(pts) > MAX_TRAJECTORY_POINTS:
                idx = np.linspace(0, len(pts) - 1, MAX_TRAJECTORY_POINTS).round().astype(int)
                pts = [pts[i] for i in idx]
            out["trajectory"] = pts
        return out

    # -- POST /energy_grid ---------------------------------------------------

    def energy_grid(self, body: dict) -> dict:
        spec = self._parse_interventions(body.get("interventions", []))
        t = int(body.get("t", 1))
        if not (0 <= t <= self.ckpt.schedule.T):
            raise RequestError(400, f"timestep {t} outside schedule range")
        res = int(body.get("resolution", 64))
        if not (1 <= res <= MAX_GRID_RESOLUTION):
            raise RequestError(400, f"resolution must be in [1, {MAX_GRID_RESOLUTION}]")
        d = self.world.d

        def axis(key, default):
            raw = body.get(key, default)
            arr = np.asarray(raw, dtype=np.float64)
            if arr.shape != (d,):
                raise RequestError(400, f"{key} must have length {d}")
            return arr

        origin = axis("origin", [0.0] * d)
        u = axis("axis_u", np.eye(d)[0].tolist())
        w = axis("axis_v", np.eye(d)[min(1, d - 1)].tolist())
        extent = float(body.get("extent", 3.0))
        coords = np.linspace(-extent, extent, res) if res > 1 else np.array([0.0])

        uu, vv = np.meshgrid(coords, coords, indexing="ij")
        pts = origin[None, :] + uu.reshape(-1, 1) * u[None, :] + vv.reshape(-1, 1) * w[None, :]
        try:
            _, e_row, _ = intervention_grad_batch(self.ckpt.net, pts, t, spec)
        except FloatingPointError as e:
            raise RequestError(500, f"non-finite energy: {e}")
        grid = e_row.reshape(res, res)
        return {
            "t": t,
            "resolution": res,
            "extent": extent,
            "values": [[float(x) for x in row] for row in grid],
            "checkpoint_hash": self.ckpt_hash,
        }


def _dump(payload: dict) -> bytes:
    return (json.dumps(payload, sort_keys=True) + "\n").encode("utf-8")


def make_handler(service: PlaygroundService, quiet: bool = True):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            if not quiet:
                super().log_message(fmt, *args)

        def _send(self, status: int, payload: dict, headers: dict | None = None):
            body = _dump(payload)
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("X-Checkpoint-Hash", service.ckpt_hash)
            for k, v in (headers or {}).items():
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(body)

        def _error(self, status: int, message: str):
            payload = {"error": message}
            if status >= 500:
                payload["diagnostic_id"] = uuid.uuid4().hex[:12]
            self._send(status, payload)

        def do_GET(self):
            started = time.perf_counter()
            if self.path == "/health":
                self._send(200, service.health())
            elif self.path == "/info":
                self._send(200, service.info())
            elif self.path == "/concepts":
                payload, etag = service.concepts()
                self._send(200, payload, {"ETag": etag})
            else:
                self._error(404, f"no such endpoint: {self.path}")
            _ = started

        def do_POST(self):
            started = time.perf_counter()
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw.decode("utf-8")) if raw.strip() else {}
            except json.JSONDecodeError as e:
                self._error(400, f"request body is not valid JSON: {e.msg}")
                return
            try:
                if self.path == "/sample":
                    payload = service.sample(body)
                elif self.path == "/energy_grid":
                    payload = service.energy_grid(body)
                else:
                    self._error(404, f"no such endpoint: {self.path}")
                    return
            except RequestError as e:
                self._error(e.status, str(e))
                return
            except Exception as e:  # pragma: no cover - defensive
                self._error(500, f"internal error: {e}")
                return
            elapsed = (time.perf_counter() - started) * 1000.0
            self._send(200, payload, {"X-Elapsed-Ms": f"{elapsed:.3f}"})

    return Handler


def start_server(
    ckpt: Checkpoint, ckpt_hash: str, host: str = "127.0.0.1", port: int = 0, quiet=True
) -> tuple[ThreadingHTTPServer, threading.Thread]:
    """Bind and serve on a daemon thread; returns (server, thread).

    Raises OSError if the port is taken.
    """
    service = PlaygroundService(ckpt, ckpt_hash)
    server = ThreadingHTTPServer((host, port), make_handler(service, quiet=quiet))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


def serve_forever(ckpt: Checkpoint, ckpt_hash: str, host: str, port: int, quiet=False):
    """Blocking variant for the CLI; shuts down cleanly on SIGINT/SIGTERM."""
    import signal

    service = PlaygroundService(ckpt, ckpt_hash)
    server = ThreadingHTTPServer((host, port), make_handler(service, quiet=quiet))

    def _stop(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    if not quiet:
        print(f"serving on http://{host}:{port} (checkpoint {ckpt_hash[:12]})")
    try:
        server.serve_forever()
    finally:
        server.server_close()
