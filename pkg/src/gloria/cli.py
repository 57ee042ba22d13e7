"""Command-line entrypoint: data generation, training, evaluation, the
interpretability pipeline, gradient checking, and a one-command demo."""

from __future__ import annotations

import argparse
import os
import sys
import time

from . import geoviz, interp, model as model_mod, synthdata, train as train_mod
from .adapter import param_count
from .gradcheck import run_grad_check
from .matcore import make_rng
from .synthdata import WorldSpec
from .train import TrainConfig


def _default_seed() -> int:
    return int(os.environ.get("GLORIA_SEED", "0"))


def _ensure_fresh(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def _add_world_flags(p: argparse.ArgumentParser) -> None:
    base = WorldSpec()
    p.add_argument("--regions", type=int, default=base.regions)
    p.add_argument("--k-true", type=int, default=base.k_true)
    p.add_argument("--dims", type=int, default=base.d)
    p.add_argument("--sites", type=int, default=base.n_sites)
    p.add_argument("--sigma-c", type=float, default=base.sigma_c)
    p.add_argument("--sigma-y", type=float, default=base.sigma_y)
    p.add_argument("--strength", type=float, default=base.strength)
    p.add_argument("--mix-noise", type=float, default=base.mix_noise)
    p.add_argument("--n", type=int, default=4000)


def _world_spec(args) -> WorldSpec:
    return WorldSpec(regions=args.regions, k_true=args.k_true, d=args.dims,
                     n_sites=args.sites, sigma_c=args.sigma_c,
                     sigma_y=args.sigma_y, strength=args.strength,
                     mix_noise=args.mix_noise)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=model_mod.MODES, default="gloria")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--base-lr", type=float, default=0.001)
    p.add_argument("--warmup-steps", type=int, default=1500)
    p.add_argument("--lambda-orth", type=float, default=0.8)
    p.add_argument("--lambda-sp", type=float, default=5.0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--grad-accum", type=int, default=1)
    p.add_argument("--warm-start-epochs", type=int, default=0)
    p.add_argument("--config", help="flat key=value config file; flags win")


def _train_config(args) -> TrainConfig:
    cfg = train_mod.load_config(args.config) if args.config else TrainConfig()
    overrides = {
        "base_lr": args.base_lr, "warmup_steps": args.warmup_steps,
        "lam_orth": args.lambda_orth, "lam_sp": args.lambda_sp,
        "epochs": args.epochs, "batch_size": args.batch_size,
        "grad_accum": args.grad_accum, "seed": args.seed, "mode": args.mode,
        "rank": args.rank, "hidden": args.hidden,
        "warm_start_epochs": args.warm_start_epochs,
    }
    defaults = TrainConfig().to_dict()
    for k, v in overrides.items():
        if not args.config or v != defaults.get(k):
            setattr(cfg, k, v)
    return cfg


def cmd_gen_data(args) -> int:
    spec = _world_spec(args)
    world = synthdata.make_world(spec, args.seed)
    data = synthdata.sample_dataset(world, args.n, make_rng(args.seed + 1))
    _ensure_fresh(args.out, args.force)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    synthdata.save_dataset(data, args.out)
    synthdata.save_world_manifest(spec, args.seed, args.n, args.out + ".manifest")
    print(f"wrote {data.n} samples across {spec.regions} regions to {args.out}")
    return 0


def _regen_world_and_data(args):
    """Rebuild world + dataset from a dataset manifest (exact regeneration)."""
    spec, seed, n = synthdata.load_world_manifest(args.data + ".manifest")
    world = synthdata.make_world(spec, seed)
    data = synthdata.load_dataset(args.data)
    return spec, world, data


def cmd_train(args) -> int:
    spec, world, data = _regen_world_and_data(args)
    cfg = _train_config(args)
    rng = make_rng(cfg.seed + 104729)
    if args.holdout_region is not None:
        tr, va, te = synthdata.split(data, rng, holdout_region=args.holdout_region)
    else:
        tr, va, te = synthdata.split(data, rng)
    m = train_mod.make_model_for_world(world, cfg, tr.bounds)
    m, log = train_mod.train(cfg, m, tr, va)
    _ensure_fresh(args.out, args.force)
    model_mod.save_backbone(m, args.out)
    log.to_csv(os.path.join(args.out, "runlog.csv"))
    train_mod.save_config(cfg, os.path.join(args.out, "config.txt"))
    pc = param_count(spec.d, spec.d, cfg.rank, cfg.hidden, n_sites=spec.n_sites,
                     gated=(cfg.mode == "gloria"))
    print(f"mode={cfg.mode} final_val_loss={log.final_val_loss:.6g} "
          f"trainable={pc.trainable} ({pc.fraction:.2%})")
    return 0


def cmd_eval(args) -> int:
    _, world, data = _regen_world_and_data(args)
    m = model_mod.load_backbone(args.model, mode=args.mode)
    metrics = train_mod.evaluate(m, data, region_count=world.spec.regions)
    print(f"mean_loss={metrics.mean_loss:.6g}")
    for r, v in sorted(metrics.per_region.items()):
        print(f"region {r}: loss={v:.6g} n={metrics.counts[r]}")
    for r in metrics.missing_regions:
        print(f"region {r}: no samples (omitted)")
    return 0


def cmd_extract_gates(args) -> int:
    _, world, data = _regen_world_and_data(args)
    m = model_mod.load_backbone(args.model, mode="gloria")
    locs = interp.locations_from_dataset(data, max_locations=args.max_locations,
                                         rng=make_rng(args.seed))
    gm = interp.extract_gates(m, locs)
    _ensure_fresh(args.out, args.force)
    interp.save_gate_matrix(gm, args.out, args.out + ".locations.csv")
    print(f"gate matrix {gm.g.shape[0]}x{gm.g.shape[1]} -> {args.out}")
    return 0


def cmd_nmf(args) -> int:
    gm = interp.load_gate_matrix(args.gates, args.gates + ".locations.csv")
    factors = interp.nmf_kl(gm.g, args.k, iters=args.iters)
    kl = interp.kl_divergence(gm.g, factors.s, factors.l)
    _ensure_fresh(args.out, args.force)
    interp.save_nmf(factors, args.out, kl, args.iters)
    print(f"k={args.k} final_kl={kl:.6g} -> {args.out}")
    return 0


def cmd_elbow(args) -> int:
    gm = interp.load_gate_matrix(args.gates, args.gates + ".locations.csv")
    ks = list(range(args.k_min, args.k_max + 1))
    k_star, curve = interp.elbow_select(gm.g, ks, iters=args.iters)
    _ensure_fresh(args.out, args.force)
    interp.save_elbow_curve(curve, args.out)
    print(f"k*={k_star}")
    return 0


def cmd_aggregate(args) -> int:
    gm = interp.load_gate_matrix(args.gates, args.gates + ".locations.csv")
    factors = interp.load_nmf(args.nmf)
    regions = [loc.region for loc in gm.locations]
    region_count = args.region_count or (max(regions) + 1)
    agg, empty = interp.aggregate_by_region(factors, regions, region_count)
    _ensure_fresh(args.out, args.force)
    from .matcore import save_matrix
    save_matrix(agg, args.out)
    print(f"aggregate {agg.shape[0]}x{agg.shape[1]} -> {args.out}"
          + (f" (empty regions: {empty})" if empty else ""))
    return 0


def cmd_map(args) -> int:
    gm = interp.load_gate_matrix(args.gates, args.gates + ".locations.csv")
    factors = interp.load_nmf(args.nmf)
    _ensure_fresh(args.out_csv, args.force)
    _ensure_fresh(args.out_svg, args.force)
    geoviz.export_map_csv(factors, gm.locations, args.component, args.out_csv)
    layer = geoviz.make_map_layer(factors, gm.locations, args.component)
    geoviz.export_map_svg(layer, args.out_svg)
    print(f"component {args.component} map -> {args.out_csv}, {args.out_svg}")
    return 0


def cmd_heatmap(args) -> int:
    from .matcore import load_matrix
    agg = load_matrix(args.aggregate)
    row_order, _ = interp.cluster_order(agg, axis="rows")
    col_order, _ = interp.cluster_order(agg, axis="cols")
    _ensure_fresh(args.out, args.force)
    geoviz.export_heatmap_svg(
        agg, row_order, col_order,
        [f"comp {i}" for i in range(agg.shape[0])],
        [f"region {j}" for j in range(agg.shape[1])],
        args.out,
    )
    print(f"heatmap {agg.shape[0]}x{agg.shape[1]} -> {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    worst = run_grad_check(seed=args.seed, d=args.dims, rank=args.rank,
                           n_sites=args.sites, instances=args.instances)
    print(f"max relative error {worst:.3e}")
    return 0 if worst <= 1e-4 else 1


def cmd_demo(args) -> int:
    out = args.out or time.strftime("run-%Y%m%d-%H%M%S")
    os.makedirs(out, exist_ok=args.force or args.out is None)
    seed = args.seed
    spec = WorldSpec(d=16, n_sites=4)
    world = synthdata.make_world(spec, seed)
    data = synthdata.sample_dataset(world, 1500, make_rng(seed + 1))
    synthdata.save_dataset(data, os.path.join(out, "data.csv"))
    synthdata.save_world_manifest(spec, seed, 1500, os.path.join(out, "data.csv.manifest"))
    tr, va, te = synthdata.split(data, make_rng(seed + 104729))

    results = {}
    for mode in ("gloria", "lora"):
        cfg = TrainConfig(mode=mode, epochs=args.epochs, seed=seed,
                          warmup_steps=300)
        m = train_mod.make_model_for_world(world, cfg, tr.bounds)
        m, log = train_mod.train(cfg, m, tr, va)
        mdir = os.path.join(out, f"model-{mode}")
        model_mod.save_backbone(m, mdir)
        log.to_csv(os.path.join(mdir, "runlog.csv"))
        train_mod.save_config(cfg, os.path.join(mdir, "config.txt"))
        results[mode] = (m, train_mod.evaluate(m, te).mean_loss)

    gloria_model = results["gloria"][0]
    locs = interp.locations_from_dataset(data, max_locations=200, rng=make_rng(seed))
    gm = interp.extract_gates(gloria_model, locs)
    interp.save_gate_matrix(gm, os.path.join(out, "gates.txt"),
                            os.path.join(out, "gates.txt.locations.csv"))
    k_star, curve = interp.elbow_select(gm.g, list(range(1, 7)), iters=150)
    interp.save_elbow_curve(curve, os.path.join(out, "elbow.csv"))
    factors = interp.nmf_kl(gm.g, k_star, iters=args.nmf_iters)
    kl = interp.kl_divergence(gm.g, factors.s, factors.l)
    interp.save_nmf(factors, os.path.join(out, "nmf"), kl, args.nmf_iters)
    regions = [loc.region for loc in locs]
    agg, _ = interp.aggregate_by_region(factors, regions, spec.regions)
    from .matcore import save_matrix
    save_matrix(agg, os.path.join(out, "aggregate.txt"))
    row_order, _ = interp.cluster_order(agg, axis="rows")
    col_order, _ = interp.cluster_order(agg, axis="cols")
    geoviz.export_heatmap_svg(
        agg, row_order, col_order,
        [f"comp {i}" for i in range(agg.shape[0])],
        [f"region {j}" for j in range(agg.shape[1])],
        os.path.join(out, "heatmap.svg"),
    )
    for comp in range(factors.k):
        geoviz.export_map_csv(factors, locs, comp,
                              os.path.join(out, f"map-{comp}.csv"))
        layer = geoviz.make_map_layer(factors, locs, comp)
        geoviz.export_map_svg(layer, os.path.join(out, f"map-{comp}.svg"))
    with open(os.path.join(out, "manifest.txt"), "w") as fh:
        fh.write(f"seed={seed}\nk_star={k_star}\n")
        fh.write(f"gloria_test_loss={results['gloria'][1]:.17g}\n")
        fh.write(f"lora_test_loss={results['lora'][1]:.17g}\n")
    print(f"demo complete: k*={k_star}, "
          f"gloria test loss {results['gloria'][1]:.6g} vs "
          f"lora {results['lora'][1]:.6g} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gloria",
        description="Gated low-rank adaptation lab: planted geo-task, "
                    "training, and NMF interpretability.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=_default_seed(),
                        help="RNG seed (default: $GLORIA_SEED or 0)")
        sp.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")

    sp = sub.add_parser("gen-data", help="generate a planted geo dataset")
    _add_world_flags(sp)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train an adapter on a dataset")
    sp.add_argument("--data", required=True, help="dataset CSV from gen-data")
    sp.add_argument("--out", required=True, help="model checkpoint directory")
    sp.add_argument("--holdout-region", type=int, default=None)
    _add_train_flags(sp)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--mode", choices=model_mod.MODES, default="gloria")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("extract-gates", help="stack gate outputs per location")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-locations", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_extract_gates)

    sp = sub.add_parser("nmf", help="KL-NMF of a gate matrix")
    sp.add_argument("--gates", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--iters", type=int, default=3000)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_nmf)

    sp = sub.add_parser("elbow", help="reconstruction curve and knee selection")
    sp.add_argument("--gates", required=True)
    sp.add_argument("--k-min", type=int, default=1)
    sp.add_argument("--k-max", type=int, default=8)
    sp.add_argument("--iters", type=int, default=500)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_elbow)

    sp = sub.add_parser("aggregate", help="mean loadings per region")
    sp.add_argument("--gates", required=True)
    sp.add_argument("--nmf", required=True)
    sp.add_argument("--region-count", type=int, default=None)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_aggregate)

    sp = sub.add_parser("map", help="geospatial activation map for a component")
    sp.add_argument("--gates", required=True)
    sp.add_argument("--nmf", required=True)
    sp.add_argument("--component", type=int, required=True)
    sp.add_argument("--out-csv", required=True)
    sp.add_argument("--out-svg", required=True)
    common(sp)
    sp.set_defaults(func=cmd_map)

    sp = sub.add_parser("heatmap", help="clustered heatmap of an aggregate")
    sp.add_argument("--aggregate", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_heatmap)

    sp = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    sp.add_argument("--dims", type=int, default=8)
    sp.add_argument("--rank", type=int, default=4)
    sp.add_argument("--sites", type=int, default=4)
    sp.add_argument("--instances", type=int, default=5)
    common(sp)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("demo", help="end-to-end pipeline into a run directory")
    sp.add_argument("--out", default=None,
                    help="run directory (default: timestamped)")
    sp.add_argument("--epochs", type=int, default=6)
    sp.add_argument("--nmf-iters", type=int, default=500)
    common(sp)
    sp.set_defaults(func=cmd_demo)

    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, ArithmeticError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
