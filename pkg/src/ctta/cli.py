"""Command-line front end: stream generation, adaptation runs, verification.

Subcommands: ``gen-stream`` (config to stream CSV plus certificate JSON),
``run`` (stream plus config to metrics CSV, summary JSON, pool snapshots),
``verify`` (certified stream to cluster-correctness verdict), ``gradcheck``
(analytic-vs-finite-difference report), ``sweep`` (one metrics file per grid
point of any hyperparameter). Exit codes: 0 success, 1 runtime failure or
failed check, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .harness import (
    Hyperparams,
    build_world,
    gradient_check,
    run_ctta,
    verify_lemmas,
)
from .model import save_model
from .numerics import SeededRng
from .stream import (
    DomainSpec,
    SeparationCertificate,
    StreamConfig,
    generate_stream,
    make_separated,
    read_stream,
    write_stream,
)

_HP_FIELDS = {f.name for f in fields(Hyperparams)}


def load_config_file(path) -> tuple[dict, dict]:
    """Split a config JSON into hyperparameter and stream-config dicts."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(doc) - _HP_FIELDS - set(StreamConfig.FIELDS)
    if unknown:
        raise ValueError(f"unknown config keys rejected: {sorted(unknown)}")
    hp_doc = {k: v for k, v in doc.items() if k in _HP_FIELDS}
    sc_doc = {k: v for k, v in doc.items() if k in StreamConfig.FIELDS}
    return hp_doc, sc_doc


def _dump_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_certificate(path) -> SeparationCertificate:
    with open(path, encoding="utf-8") as fh:
        return SeparationCertificate.from_dict(json.load(fh))


def _resolve_gamma_d(flag_value, hp_doc, certificate) -> float:
    if flag_value is not None:
        return flag_value
    if "gamma_d" in hp_doc:
        return hp_doc["gamma_d"]
    if certificate is not None:
        return certificate.theta / 2.0
    return Hyperparams().gamma_d


def _world_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--noise-std", type=float, default=0.4)
    parser.add_argument("--feature-dim", type=int, default=None)
    parser.add_argument("--class-mean-scale", type=float, default=1.0)
    parser.add_argument("--source-samples", type=int, default=300)


def _build(args, sc: StreamConfig):
    return build_world(
        sc,
        feature_dim=args.feature_dim,
        noise_std=args.noise_std,
        class_mean_scale=args.class_mean_scale,
        source_samples=args.source_samples,
    )


def cmd_gen_stream(args) -> int:
    hp_doc, sc_doc = load_config_file(args.config)
    sc_doc["seed"] = args.seed
    sc = StreamConfig.from_dict(sc_doc)
    world = _build(args, sc)
    rng = SeededRng(sc.seed)
    n_domains = len(set(sc.domain_order))
    if sorted(set(sc.domain_order)) != list(range(n_domains)):
        raise ValueError("domain_order ids must be 0..N-1")

    certificate = None
    if sc.theta is not None:
        specs, certificate = make_separated(
            sc,
            n_domains,
            sc.theta,
            world.model,
            rng.child(2),
            noise_std=args.noise_std,
            class_means=world.class_means,
            probe_batches=args.probe_batches,
        )
    elif n_domains == 1:
        specs = [world.source_spec]
    else:
        dirs = rng.child(2).normal(size=(n_domains - 1, sc.input_dim))
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        specs = [world.source_spec] + [
            DomainSpec(
                i + 1,
                args.shift_scale * dirs[i],
                np.ones(sc.input_dim),
                world.class_means,
                args.noise_std,
            )
            for i in range(n_domains - 1)
        ]
    batches = generate_stream(sc, specs, rng.child(3))
    write_stream(batches, args.out)
    print(f"wrote {len(batches)} batches to {args.out}")
    if certificate is not None:
        _dump_json(certificate.to_dict(), args.certificate)
        print(
            f"certificate: theta={certificate.theta:g} "
            f"max_intra={certificate.max_intra:.6g} min_inter={certificate.min_inter:.6g}"
        )
    if args.model_out:
        save_model(world.model, args.model_out, seed=sc.seed)
    return 0


def cmd_run(args) -> int:
    hp_doc, sc_doc = load_config_file(args.config)
    sc_doc["seed"] = args.seed
    sc = StreamConfig.from_dict(sc_doc)
    certificate = _load_certificate(args.certificate) if args.certificate else None
    hp_doc["gamma_d"] = _resolve_gamma_d(args.gamma_d, hp_doc, certificate)
    hp = Hyperparams.from_dict(hp_doc)
    world = _build(args, sc)
    stream = read_stream(args.stream)
    if not stream:
        raise ValueError(f"stream {args.stream} contains no batches")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    boundaries: list[tuple[int, dict, dict]] = []
    prev_domain: list[int | None] = [None]

    def on_batch_start(batch, class_pool, domain_pool):
        if prev_domain[0] is not None and batch.domain_id != prev_domain[0]:
            boundaries.append((batch.batch_index, class_pool.to_dict(), domain_pool.to_dict()))
        prev_domain[0] = batch.domain_id

    result = run_ctta(
        world.model,
        stream,
        hp,
        world.source_stats,
        rng=SeededRng(sc.seed).child(4),
        on_batch_start=on_batch_start,
    )
    (out / "metrics.csv").write_text(result.metrics.to_csv(), encoding="utf-8")
    _dump_json(result.metrics.summary(), out / "summary.json")
    _dump_json(result.class_pool.to_dict(), out / "pools_class_final.json")
    _dump_json(result.domain_pool.to_dict(), out / "pools_domain_final.json")
    for idx, class_doc, domain_doc in boundaries:
        _dump_json(class_doc, out / f"pools_class_boundary_{idx}.json")
        _dump_json(domain_doc, out / f"pools_domain_boundary_{idx}.json")
    if args.model_out:
        save_model(world.model, args.model_out, seed=sc.seed)
    print(
        f"ran {len(stream)} batches: overall error "
        f"{result.metrics.overall_error():.4f}, outputs in {out}"
    )
    return 0


def cmd_verify(args) -> int:
    hp_doc, sc_doc = load_config_file(args.config)
    if args.seed is not None:
        sc_doc["seed"] = args.seed
    sc = StreamConfig.from_dict(sc_doc)
    certificate = _load_certificate(args.certificate)
    hp_doc["gamma_d"] = _resolve_gamma_d(args.gamma_d, hp_doc, certificate)
    hp = Hyperparams.from_dict(hp_doc)
    world = _build(args, sc)
    stream = read_stream(args.stream)
    report = verify_lemmas(
        stream,
        certificate,
        hp,
        world.model,
        world.source_stats,
        rng=SeededRng(sc.seed).child(4),
    )
    print(
        f"verify: status={report.status} batches={report.num_batches} "
        f"domains={report.num_domains}"
    )
    for issue in report.hypothesis_issues:
        print(f"  hypothesis: {issue}")
    for v in report.violations:
        print(f"  violation: {v}")
    return 0 if report.passed else 1


def cmd_gradcheck(args) -> int:
    result = gradient_check(
        args.num_configs, step=args.step, tolerance=args.tolerance, seed=args.seed
    )
    print(
        f"gradcheck: {len(result.rel_errors)} configs, "
        f"max relative error {result.max_rel_error:.3e} "
        f"(tolerance {result.tolerance:g})"
    )
    return 0 if result.passed else 1


def cmd_sweep(args) -> int:
    hp_doc, sc_doc = load_config_file(args.config)
    sc_doc["seed"] = args.seed
    sc = StreamConfig.from_dict(sc_doc)
    if args.param not in _HP_FIELDS:
        raise ValueError(f"unknown hyperparameter {args.param!r}")
    world = _build(args, sc)
    stream = read_stream(args.stream)
    if not stream:
        raise ValueError(f"stream {args.stream} contains no batches")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    field_type = {f.name: f.type for f in fields(Hyperparams)}[args.param]
    caster = {"float": float, "int": int, "bool": lambda s: s in ("1", "true", "True"), "str": str}[
        field_type
    ]
    for raw in args.values.split(","):
        value = caster(raw)
        doc = dict(hp_doc)
        doc[args.param] = value
        hp = Hyperparams.from_dict(doc)
        result = run_ctta(
            world.model,
            stream,
            hp,
            world.source_stats,
            rng=SeededRng(sc.seed).child(4),
        )
        tag = f"{args.param}_{raw}"
        (out / f"metrics_{tag}.csv").write_text(result.metrics.to_csv(), encoding="utf-8")
        _dump_json(result.metrics.summary(), out / f"summary_{tag}.json")
        print(f"{tag}: overall error {result.metrics.overall_error():.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctta", description="streaming test-time adaptation engine"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-stream", help="generate a stream CSV (plus certificate when theta is set)")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--certificate", default="certificate.json")
    p.add_argument("--probe-batches", type=int, default=20)
    p.add_argument("--shift-scale", type=float, default=2.0)
    p.add_argument("--model-out", default=None)
    _world_args(p)
    p.set_defaults(func=cmd_gen_stream)

    p = sub.add_parser("run", help="adapt over a stream file and write metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--certificate", default=None)
    p.add_argument("--gamma-d", type=float, default=None)
    p.add_argument("--model-out", default=None)
    _world_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="check cluster correctness on a certified stream")
    p.add_argument("--config", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--certificate", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--gamma-d", type=float, default=None)
    _world_args(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="analytic gradient vs central finite differences")
    p.add_argument("--num-configs", type=int, default=50)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid over one hyperparameter, one metrics file per point")
    p.add_argument("--config", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    _world_args(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
