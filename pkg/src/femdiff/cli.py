"""Batch command-line surface: mesh building, dataset generation, training,
sampling, posterior sampling, and evaluation.

All randomness flows from one root seed through named streams
(mesh/data/train/sample/chain), so every command is reproducible from its
run.json provenance record.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .data import BlobParams, generate_dataset, load_dataset
from .errors import FemdiffError
from .fem import Field, assemble_poisson
from .guidance import (
    GuidanceConfig,
    PoissonOperator,
    Potential,
    SparseSensorOperator,
    daps_sample,
    dps_sample,
    load_observation,
    run_chains,
)
from .mesh import SHAPES, dual_graph, grid_hierarchy, save_mesh, shaped_mesh, vertex_graph
from .randfield import build_covariance
from .score import FemUNet, GaussianOracleDenoiser, NetConfig, TrainConfig, train_denoiser
from .sde import NoiseSchedule, heun_sample
from .storage import load_checkpoint, read_field, save_checkpoint, write_field

def _stream_seed(root: int, name: str) -> int:
    tag = {"mesh": 0, "data": 1, "train": 2, "sample": 3, "chain": 4}[name]
    return int(np.random.SeedSequence([root, tag]).generate_state(1)[0])


def _schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg["schedule"]
    return NoiseSchedule(
        kind="ve",
        sigma_min=s["sigma_min"],
        sigma_max=s["sigma_max"],
        n_steps=s["steps"],
        rho=s["rho"],
    )


def _geometry(cfg: RunConfig):
    m = cfg["mesh"]
    mesh = shaped_mesh(m["nx"], m["ny"], m["shape"])
    hierarchy = grid_hierarchy(
        m["nx"], m["ny"], m["levels"], m["mu"], m["shape"], m["kind"]
    )
    graph = hierarchy.levels[0]
    return mesh, hierarchy, graph


def _covariance(cfg: RunConfig, graph):
    c = cfg["covariance"]
    return build_covariance(
        graph.node_positions, c["length_scale"], c["jitter"], graph.ref
    )


def _oracle(cfg: RunConfig, graph):
    o = cfg["oracle"]
    n = graph.n_nodes
    prior = build_covariance(graph.node_positions, o["length_scale"], 1e-10, graph.ref)
    noise = _covariance(cfg, graph)
    return GaussianOracleDenoiser(
        np.full(n, o["mean"]), o["scale"] ** 2 * prior.kernel, noise.kernel
    )


def _denoiser(cfg: RunConfig, spec: str, hierarchy):
    if spec == "oracle":
        return _oracle(cfg, hierarchy.levels[0])
    return load_checkpoint(spec, hierarchy)


def _blob_params(cfg: RunConfig) -> BlobParams:
    d = cfg["data"]
    return BlobParams(
        max_inclusions=d["max_inclusions"],
        background=d["background"],
        min_conductivity=d["min_conductivity"],
        semi_axis_min=d["a_min"],
        semi_axis_max=d["a_max"],
        containment=d["kappa"],
    )


def _write_run_record(out: Path, cfg: RunConfig, command: str, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": cfg.values,
        "config_hash": cfg.hash(),
        "seed": cfg["run"]["seed"],
        "versions": {"femdiff": __version__, "numpy": np.__version__},
        **extra,
    }
    with open(out / "run.json", "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2)


def cmd_mesh(cfg: RunConfig, args) -> int:
    out = Path(cfg["run"]["out"])
    mesh, hierarchy, graph = _geometry(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(out / "mesh.txt", mesh)
    summary = {
        "n_vertices": mesh.n_vertices,
        "n_triangles": mesh.n_triangles,
        "levels": [g.n_nodes for g in hierarchy.levels],
        "median_edges": list(hierarchy.median_edges),
        "radii": list(hierarchy.radii),
    }
    with open(out / "hierarchy.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    _write_run_record(out, cfg, "mesh", {"outputs": ["mesh.txt", "hierarchy.json"]})
    print(f"mesh: {mesh.n_triangles} triangles, levels {summary['levels']}")
    return 0


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(cfg["run"]["out"]) / "dataset"
    _, _, graph = _geometry(cfg)
    params = _blob_params(cfg)
    seed = _stream_seed(cfg["run"]["seed"], "data")
    contains = SHAPES[cfg["mesh"]["shape"]]
    manifest = generate_dataset(
        graph, params, cfg["data"]["count"], out,
        split=cfg["data"]["split"], seed=seed, contains=contains,
    )
    _write_run_record(out, cfg, "gen-data", {"manifest": manifest})
    print(f"dataset: {manifest['n_train']} train / {manifest['n_test']} test in {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg["run"]["out"])
    _, hierarchy, graph = _geometry(cfg)
    data_dir = Path(args.data) if args.data else out / "dataset"
    train_fields, _, _ = load_dataset(data_dir, graph.ref)
    factor = _covariance(cfg, graph)
    schedule = _schedule(cfg)
    mcfg = cfg["model"]
    net_config = NetConfig(
        hidden=mcfg["hidden"],
        convs_per_level=mcfg["convs_per_level"],
        patch=mcfg["patch"],
        time_dim=mcfg["time_dim"],
        freq_scale=mcfg["freq_scale"],
        mixing=mcfg["mixing"],
        in_channels=train_fields[0].channels,
        sigma_min=schedule.sigma_min,
        sigma_max=schedule.sigma_max,
    )
    seed = _stream_seed(cfg["run"]["seed"], "train")
    net = FemUNet(hierarchy, net_config, np.random.default_rng([seed, 0]))
    t = cfg["train"]
    tcfg = TrainConfig(
        batch_size=t["batch"],
        iterations=args.iterations or t["iterations"],
        learning_rate=t["lr"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        seed=seed,
    )
    trace = train_denoiser(net, train_fields, factor, schedule, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.grif", net)
    with open(out / "loss_trace.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss"])
        writer.writerows((i, float(v)) for i, v in enumerate(trace))
    _write_run_record(
        out, cfg, "train",
        {"iterations": tcfg.iterations, "n_params": net.n_params,
         "initial_loss": float(trace[0]), "final_loss": float(trace[-1])},
    )
    print(f"train: {tcfg.iterations} iterations, loss {trace[0]:.4g} -> {trace[-1]:.4g}")
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    out = Path(cfg["run"]["out"]) / "samples"
    _, hierarchy, graph = _geometry(cfg)
    factor = _covariance(cfg, graph)
    schedule = _schedule(cfg)
    denoiser = _denoiser(cfg, args.denoiser, hierarchy)
    count = args.count or cfg["sample"]["count"]
    seed = _stream_seed(cfg["run"]["seed"], "sample")

    fields = run_chains(
        lambda rng: heun_sample(denoiser, schedule, factor, rng),
        count, seed, threads=args.threads,
    )
    out.mkdir(parents=True, exist_ok=True)
    for i, field in enumerate(fields):
        write_field(out / f"sample_{i:05d}.fld", field)
    _write_run_record(out, cfg, "sample",
                      {"denoiser": args.denoiser, "count": count})
    print(f"sample: {count} fields in {out}")
    return 0


def cmd_posterior(cfg: RunConfig, args) -> int:
    out = Path(cfg["run"]["out"]) / "ensemble"
    mesh, hierarchy, graph = _geometry(cfg)
    factor = _covariance(cfg, graph)
    schedule = _schedule(cfg)
    denoiser = _denoiser(cfg, args.denoiser, hierarchy)
    g = cfg["guidance"]
    gcfg = GuidanceConfig(
        zeta=args.zeta if args.zeta is not None else g["zeta"],
        precondition_with_C=g["precondition"],
        daps_levels=g["daps_levels"],
        daps_langevin_steps=g["daps_steps"],
        daps_eta0=g["daps_eta"],
    )

    obs = load_observation(args.observation)
    if obs["kind"] == "sensors":
        op = SparseSensorOperator(obs["sensors"], graph.n_nodes, g["sigma_obs"], graph.ref)
        y = obs["values"][:, None]
    else:
        op = PoissonOperator(assemble_poisson(mesh), g["sigma_obs"])
        y = read_field(Path(args.observation).parent / obs["field_path"])
    potential = Potential(op, y)

    sample_fn = dps_sample if args.method == "dps" else daps_sample
    seed = _stream_seed(cfg["run"]["seed"], "chain")
    fields = run_chains(
        lambda rng: sample_fn(denoiser, schedule, factor, potential, gcfg, rng),
        args.chains, seed, threads=args.threads,
    )
    out.mkdir(parents=True, exist_ok=True)
    for i, field in enumerate(fields):
        write_field(out / f"chain_{i:05d}.fld", field)
    _write_run_record(
        out, cfg, "posterior",
        {"denoiser": args.denoiser, "method": args.method,
         "chains": args.chains, "observation": str(args.observation)},
    )
    print(f"posterior: {args.chains} {args.method} chains in {out}")
    return 0


def _read_fields(directory) -> list[Field]:
    files = sorted(Path(directory).glob("*.fld"))
    if not files:
        raise FemdiffError(f"no field files in {directory}")
    return [Field(read_field(p)) for p in files]


def cmd_eval(cfg: RunConfig, args) -> int:
    from .metrics import SampleEnsemble, energy_score, mmd_unbiased, rmse_posterior_mean

    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    samples = _read_fields(args.samples)
    seed = cfg["run"]["seed"]
    rows = []

    if args.truth:
        truth = Field(read_field(args.truth))
        ens = SampleEnsemble((tuple(samples),), (truth,))
        rows.append({"metric": "rmse_posterior_mean", "value": rmse_posterior_mean(ens),
                     "n": 1, "K": len(samples), "seed": seed})
        rows.append({"metric": "energy_score", "value": energy_score(ens),
                     "n": 1, "K": len(samples), "seed": seed})
    if args.reference:
        reference = _read_fields(args.reference)
        mmd = mmd_unbiased(samples, reference, cfg["eval"]["mmd_length_scale"])
        rows.append({"metric": "mmd_squared_unbiased", "value": mmd.squared,
                     "n": len(reference), "K": len(samples), "seed": seed})
        rows.append({"metric": "mmd_root", "value": mmd.root,
                     "n": len(reference), "K": len(samples), "seed": seed})
    if not rows:
        raise FemdiffError("eval needs --truth and/or --reference")

    with open(out / "metrics.jsonl", "a", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    csv_path = out / "metrics.csv"
    new_file = not csv_path.exists()
    with open(csv_path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["metric", "value", "n", "K", "seed"])
        if new_file:
            writer.writeheader()
        writer.writerows(rows)
    _write_run_record(out, cfg, "eval",
                      {"samples": str(args.samples), "truth": args.truth,
                       "reference": args.reference})
    for row in rows:
        print(f"{row['metric']}: {row['value']:.6g}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="femdiff",
        description="Function-space diffusion on triangulated domains.",
    )
    parser.add_argument("--config", type=str, default=None, help="config file path")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    parser.add_argument("--out", type=str, default=None, help="override run.out")
    parser.add_argument("--threads", type=int, default=1, help="chain parallelism")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("mesh", help="build the mesh and hierarchy artifacts")
    sub.add_parser("gen-data", help="generate a blob dataset")

    p_train = sub.add_parser("train", help="train the denoiser")
    p_train.add_argument("--data", type=str, default=None, help="dataset directory")
    p_train.add_argument("--iterations", type=int, default=None)

    p_sample = sub.add_parser("sample", help="unconditional sampling")
    p_sample.add_argument("--denoiser", type=str, required=True,
                          help="checkpoint path or 'oracle'")
    p_sample.add_argument("--count", type=int, default=None)

    p_post = sub.add_parser("posterior", help="posterior sampling")
    p_post.add_argument("--denoiser", type=str, required=True)
    p_post.add_argument("--observation", type=str, required=True)
    p_post.add_argument("--method", choices=("dps", "daps"), default="dps")
    p_post.add_argument("--chains", type=int, default=10)
    p_post.add_argument("--zeta", type=float, default=None)

    p_eval = sub.add_parser("eval", help="evaluate samples")
    p_eval.add_argument("--samples", type=str, required=True)
    p_eval.add_argument("--truth", type=str, default=None)
    p_eval.add_argument("--reference", type=str, default=None)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        overrides = {"run": {}}
        if args.seed is not None:
            overrides["run"]["seed"] = args.seed
        if args.out is not None:
            overrides["run"]["out"] = args.out
        cfg = RunConfig.load(args.config, overrides)
        handler = {
            "mesh": cmd_mesh,
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "sample": cmd_sample,
            "posterior": cmd_posterior,
            "eval": cmd_eval,
        }[args.command]
        return handler(cfg, args)
    except (FemdiffError, OSError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
