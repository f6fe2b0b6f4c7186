"""Command-line entry points: train, intervene, eval, serve.

Configuration is a single JSON document with sections (run, world,
schedule, model, train, sampler, eval); any leaf can be overridden with an
environment variable COCO_<SECTION>_<KEY>.  All randomness flows from the
seeds in the config.

Exit codes: 0 ok, 2 usage/config error, 3 numeric failure, 4 environment.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .diffusion import make_schedule
from .energymodel import ACTIVE, NEGATED, InterventionSpec, NetConfig
from .evalsuite import EvalConfig, default_eval_specs, run_eval, save_summary_csv
from .sampler import SamplerConfig, compose, run_sampler_batch
from .synthworld import glyph_attributes, make_world, oracle_label_batch
from .trainer import TrainConfig, TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_ENVIRONMENT = 4

ENV_PREFIX = "COCO"

_SECTIONS = {
    "run": {"out_dir": str, "seed": int},
    "world": {
        "d": int,
        "concept_names": list,
        "seed": int,
        "orthonormal": bool,
    },
    "schedule": {"kind": str, "T": int},
    "model": {
        "hidden": int,
        "n_hidden_layers": int,
        "time_dim": int,
        "head_init": str,
    },
    "train": {
        "gamma": float,
        "lr": float,
        "batch_size": int,
        "steps": int,
        "beta1": float,
        "beta2": float,
        "adam_eps": float,
        "seed": int,
        "eval_every": int,
        "grad_check": bool,
        "grad_check_coords": int,
    },
    "sampler": {
        "steps_per_timestep": int,
        "eta": float,
        "eta_decay": str,
        "t_end": int,
        "noise_scale": float,
        "seed": int,
        "clip_norm": float,
    },
    "eval": {
        "n_samples": int,
        "seed": int,
        "mmd_noise_scale": float,
        "mmd_permutations": int,
    },
}

DEFAULT_CONFIG = {
    "run": {"seed": 0},
    "world": {"d": 8, "concept_names": ["Round", "Tilted", "Large", "Warm"], "seed": 0, "orthonormal": True},
    "schedule": {"kind": "cosine", "T": 100},
    "model": {"hidden": 64, "n_hidden_layers": 2, "time_dim": 32, "head_init": "zeros"},
    "train": {},
    "sampler": {},
    "eval": {},
}


class ConfigError(ValueError):
    pass


def _coerce(raw: str, typ):
    if typ is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if typ is list:
        return [x for x in raw.split(",") if x]
    return typ(raw)


def load_config(path: str | None, env: dict | None = None) -> dict:
    """Merge defaults <- config file <- COCO_* environment overrides."""
    merged = {sec: dict(vals) for sec, vals in DEFAULT_CONFIG.items()}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON ({path}, line {e.lineno}): {e.msg}")
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object with sections")
        for sec, vals in doc.items():
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown config section {sec!r}")
            if not isinstance(vals, dict):
                raise ConfigError(f"section {sec!r} must be an object")
            for key, val in vals.items():
                if key not in _SECTIONS[sec]:
                    raise ConfigError(f"unknown config key {sec}.{key}")
                merged.setdefault(sec, {})[key] = val

    env = os.environ if env is None else env
    for sec, keys in _SECTIONS.items():
        for key, typ in keys.items():
            var = f"{ENV_PREFIX}_{sec.upper()}_{key.upper()}"
            if var in env:
                merged.setdefault(sec, {})[key] = _coerce(env[var], typ)
    return merged


def require_key(cfg: dict, section: str, key: str):
    if key not in cfg.get(section, {}):
        raise ConfigError(f"missing required config key: {section}.{key}")
    return cfg[section][key]


def _build_pieces(cfg: dict):
    w = cfg["world"]
    world = make_world(
        d=w["d"],
        concept_names=tuple(w["concept_names"]),
        seed=w["seed"],
        orthonormal=w.get("orthonormal", True),
    )
    schedule = make_schedule(cfg["schedule"]["kind"], cfg["schedule"]["T"])
    m = cfg["model"]
    net_cfg = NetConfig(
        d=world.d,
        t_scale=schedule.T,
        hidden=m["hidden"],
        n_hidden_layers=m["n_hidden_layers"],
        time_dim=m["time_dim"],
        head_init=m["head_init"],
    )
    return world, schedule, net_cfg


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{**{"seed": cfg["run"].get("seed", 0)}, **cfg["train"]})


def _sampler_config(cfg: dict, seed=None) -> SamplerConfig:
    kw = dict(cfg["sampler"])
    if seed is not None:
        kw["seed"] = seed
    return SamplerConfig(**kw)


# ---------------------------------------------------------------------------
# Spec expressions: "+Name[=value],-Name"; unlisted concepts stay neutral
# ---------------------------------------------------------------------------


def parse_spec_expr(expr: str, concept_spec) -> InterventionSpec:
    items = []
    for raw in expr.split(","):
        term = raw.strip()
        if not term:
            continue
        if term[0] == "+":
            body = term[1:]
            if "=" in body:
                name, _, val = body.partition("=")
                items.append(("active", concept_spec.index_of(name.strip()), int(val)))
            else:
                items.append(("active", concept_spec.index_of(body.strip()), 1))
        elif term[0] == "-":
            items.append(("negated", concept_spec.index_of(term[1:].strip()), 1))
        else:
            raise ValueError(f"bad spec term {term!r}: expected +Name[=value] or -Name")
    return compose(concept_spec, items)


def format_spec_expr(spec: InterventionSpec, concept_spec) -> str:
    parts = []
    for k, (state, target) in enumerate(zip(spec.states, spec.targets)):
        name = concept_spec.names[k]
        if state == ACTIVE:
            parts.append(f"+{name}" if target == 1 else f"+{name}={target}")
        elif state == NEGATED:
            parts.append(f"-{name}")
    return ",".join(parts)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg["run"]["out_dir"] = args.out
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
            cfg["train"]["seed"] = args.seed
        out_dir = Path(require_key(cfg, "run", "out_dir"))
        world, schedule, net_cfg = _build_pieces(cfg)
        train_cfg = _train_config(cfg)
    except (ConfigError, ValueError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"cannot create output directory: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT

    (out_dir / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    try:
        ckpt = train(
            world,
            schedule,
            train_cfg,
            net_cfg,
            metric_log_path=out_dir / "metrics.csv",
            progress=not args.quiet,
        )
    except TrainingDiverged as e:
        save_checkpoint(out_dir / "checkpoint", e.last_good)
        print(f"numeric failure: {e}; last good checkpoint retained", file=sys.stderr)
        return EXIT_NUMERIC
    digest = save_checkpoint(out_dir / "checkpoint", ckpt)
    if not args.quiet:
        print(f"checkpoint {digest[:12]} written to {out_dir / 'checkpoint'}")
    return EXIT_OK


def _load_checkpoint_or_exit(path: str):
    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError:
        print(f"checkpoint not found: {path}", file=sys.stderr)
        return None, EXIT_USAGE
    except (ValueError, KeyError) as e:
        print(f"cannot load checkpoint: {e}", file=sys.stderr)
        return None, EXIT_USAGE
    if ckpt.world is None:
        print("checkpoint carries no world config; cannot label or decode", file=sys.stderr)
        return None, EXIT_USAGE
    return ckpt, EXIT_OK


def cmd_intervene(args) -> int:
    ckpt, code = _load_checkpoint_or_exit(args.checkpoint)
    if ckpt is None:
        return code
    world = ckpt.world
    try:
        spec = parse_spec_expr(args.spec, world.spec)
    except (KeyError, ValueError) as e:
        msg = e.args[0] if e.args else str(e)
        print(f"bad spec expression: {msg}", file=sys.stderr)
        return EXIT_USAGE

    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    sampler_cfg = _sampler_config(cfg, seed=args.seed)

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"cannot create output directory: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT

    try:
        finals, records, clipped = run_sampler_batch(
            ckpt.net, ckpt.schedule, spec, sampler_cfg, n=args.n, record=True
        )
    except FloatingPointError as e:
        print(f"numeric failure during sampling: {e}", file=sys.stderr)
        return EXIT_NUMERIC

    names = world.spec.names
    with (out_dir / "trajectories.jsonl").open("w") as fh:
        for step, (t, V, e_row, per) in enumerate(records):
            for i in range(args.n):
                fh.write(
                    json.dumps(
                        {
                            "trajectory": i,
                            "step": step,
                            "t": int(t),
                            "latent": [float(x) for x in V[i]],
                            "energy": float(e_row[i]),
                            "per_concept": {
                                names[k]: float(vals[i]) for k, vals in per.items()
                            },
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    attrs = glyph_attributes(world, finals)
    labels = oracle_label_batch(world, finals)
    with (out_dir / "glyphs.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index"]
            + [f"v{i}" for i in range(world.d)]
            + [f"attr_{i}" for i in range(attrs.shape[1])]
            + [f"c_{n}" for n in names]
        )
        for i in range(args.n):
            writer.writerow(
                [i]
                + [repr(float(x)) for x in finals[i]]
                + [repr(float(x)) for x in attrs[i]]
                + [int(c) for c in labels[i]]
            )

    summary = {
        "spec": spec.to_manifest(),
        "spec_expr": format_spec_expr(spec, world.spec),
        "n": args.n,
        "seed": sampler_cfg.seed,
        "clipped_updates": clipped,
        "checkpoint_hash": checkpoint_hash(args.checkpoint),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    if not args.quiet:
        print(f"{args.n} trajectories written to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, code = _load_checkpoint_or_exit(args.checkpoint)
    if ckpt is None:
        return code
    world = ckpt.world
    try:
        cfg = load_config(args.config)
        eval_kw = dict(cfg["eval"])
        if args.n is not None:
            eval_kw["n_samples"] = args.n
        if args.seed is not None:
            eval_kw["seed"] = args.seed
        eval_cfg = EvalConfig(sampler=_sampler_config(cfg), **eval_kw)
        if args.specs:
            doc = json.loads(Path(args.specs).read_text())
            specs = [
                (entry["name"], parse_spec_expr(entry["expr"], world.spec))
                for entry in doc["specs"]
            ]
        else:
            specs = default_eval_specs(world)
    except (ConfigError, KeyError, ValueError, FileNotFoundError) as e:
        print(f"cannot set up evaluation: {e}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"cannot create output directory: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT

    report = run_eval(ckpt, world, specs, eval_cfg)
    report.save(out_dir / "report.json")
    save_summary_csv(out_dir / "summary.csv", report)
    if not args.quiet:
        for row in report.summary_rows():
            print(f"{row['spec']}: mean={row['mean_accuracy']:.3f} joint={row['joint']:.3f}")
        print(f"mmd={report.mmd_block['mmd']:.5f} p={report.mmd_block['permutation_p']:.4f}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve_forever

    ckpt, code = _load_checkpoint_or_exit(args.checkpoint)
    if ckpt is None:
        return code
    host, _, port = args.bind.rpartition(":")
    try:
        port = int(port)
    except ValueError:
        print(f"bad bind address {args.bind!r}; expected HOST:PORT", file=sys.stderr)
        return EXIT_USAGE
    digest = checkpoint_hash(args.checkpoint)
    try:
        serve_forever(ckpt, digest, host or "127.0.0.1", port, quiet=args.quiet)
    except OSError as e:
        print(f"cannot bind {args.bind}: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an energy network on a synthetic world")
    p.add_argument("--config", default=None, help="JSON config with sections")
    p.add_argument("--out", default=None, help="output directory (overrides run.out_dir)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("intervene", help="sample latents under a concept intervention")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", required=True, help='e.g. "+Round,-Warm"')
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("eval", help="run the evaluation battery")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--specs", default=None, help="JSON file with named spec expressions")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve the playground HTTP API")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bind", default="127.0.0.1:8351")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
