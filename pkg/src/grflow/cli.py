"""Command-line entry point binding graphs, flows, training and inversion.

Every run writes a manifest.json into its output directory recording the
full configuration, seed, input hashes and produced artifacts, so runs can
be reproduced exactly.  Exit codes: 0 success, 1 runtime/numeric failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .datasets import (
    DataError,
    DatasetBundle,
    PROTEIN_GRAPH,
    SYNTHETIC_MODELS,
    gen_synthetic,
    load_dataset_dir,
    resolve_model_name,
    write_csv,
)
from .flow import ResidualFlow, flow_forward_np, load_checkpoint
from .graphs import GraphError, parse_graph
from .inversion import InversionConfig, default_alpha_grid, grid_search_inversion, invert_flow, reconstruction_curve
from .masks import MaskError
from .training import (
    PRESETS,
    TrainConfig,
    TrainingDiverged,
    evaluate_elbo,
    evaluate_log_prob,
    flow_from_preset,
    train,
)


class UsageError(Exception):
    pass


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, config: dict, seed,
                    artifacts: list[str], inputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": sorted(os.path.relpath(a, out_dir) for a in artifacts),
        "input_hashes": {p: _sha256(p) for p in inputs if p and os.path.isfile(p)},
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "grflow_version": __version__,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _config_snapshot(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _graph_for(args) -> tuple[str, object]:
    """Resolve (graph_text, synthetic model or None) from preset/flags."""
    model = None
    if getattr(args, "preset", None):
        preset = PRESETS[args.preset]
        if preset.dataset == "protein":
            graph_text = PROTEIN_GRAPH
        else:
            model = SYNTHETIC_MODELS[preset.dataset]
            graph_text = model.graph_text
        return graph_text, model
    if getattr(args, "graph", None):
        with open(args.graph, encoding="utf-8") as fh:
            graph_text = fh.read()
        if getattr(args, "dataset", None):
            model = SYNTHETIC_MODELS[resolve_model_name(args.dataset)]
        return graph_text, model
    if getattr(args, "dataset", None):
        model = SYNTHETIC_MODELS[resolve_model_name(args.dataset)]
        return model.graph_text, model
    raise UsageError("need --preset, --graph or --dataset to define the model structure")


def _load_bundle(args, graph_text: str, model, standardize: bool) -> DatasetBundle:
    graph = parse_graph(graph_text)
    if getattr(args, "data", None):
        return load_dataset_dir(args.data, graph, standardize=standardize, model=model)
    if model is None:
        raise UsageError("no --data directory given and the dataset is not synthetic")
    return gen_synthetic(model.name, args.n_train, args.n_test, args.seed, standardize)


def _bundle_for_checkpoint(args, flow: ResidualFlow, extras: dict) -> DatasetBundle:
    """Evaluation data on the checkpoint's training scale."""
    name = getattr(args, "dataset", None) or extras.get("dataset")
    model = SYNTHETIC_MODELS.get(resolve_model_name(name)) if name in _known_names() else None
    graph = parse_graph(flow.source_graph_text)
    if getattr(args, "data", None):
        bundle = load_dataset_dir(args.data, graph, standardize=False, model=model)
    elif model is not None:
        bundle = gen_synthetic(model.name, args.n_train, args.n_test, args.seed, False)
    else:
        raise UsageError("need --data (or a synthetic --dataset) to evaluate against")
    st = extras.get("standardization")
    if st:
        mean = np.array(st["mean"], dtype=np.float64)
        std = np.array(st["std"], dtype=np.float64)
        bundle = DatasetBundle(
            bundle.name, (bundle.train - mean) / std, (bundle.test - mean) / std,
            bundle.graph, model=bundle.model, standardization=(mean, std),
            notes=dict(bundle.notes, standardized=True),
        )
    return bundle


def _known_names():
    names = set(SYNTHETIC_MODELS)
    names.update(("arith", "arithmetic_circuit"))
    return names


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    model = SYNTHETIC_MODELS[resolve_model_name(args.dataset)]
    bundle = gen_synthetic(model.name, args.n_train, args.n_test, args.seed,
                            standardize=False)
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.csv")
    test_path = os.path.join(args.out, "test.csv")
    write_csv(train_path, bundle.train, bundle.graph.nodes)
    write_csv(test_path, bundle.test, bundle.graph.nodes)
    _write_manifest(args.out, "gen-data", _config_snapshot(args), args.seed,
                    [train_path, test_path], [])
    print(f"wrote {train_path} ({bundle.train.shape[0]} rows) and "
          f"{test_path} ({bundle.test.shape[0]} rows)")
    return 0


def cmd_train(args) -> int:
    graph_text, model = _graph_for(args)
    bundle = _load_bundle(args, graph_text, model, standardize=args.standardize)
    if args.preset:
        preset = PRESETS[args.preset]
    else:
        if not (args.blocks and args.width):
            raise UsageError("--blocks and --width are required without --preset")
        from .training import Preset

        preset = Preset("custom", bundle.name, args.blocks, args.width, args.c)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr_init=args.lr,
        lip_bound=args.c, seed=args.seed, objective=args.objective,
        elbo_samples=args.elbo_samples,
    )
    flow = flow_from_preset(preset, graph_text, args.objective, args.seed, args.c)
    extras = {
        "dataset": bundle.name,
        "objective": args.objective,
        "standardization": None,
    }
    if bundle.standardization is not None:
        mean, std = bundle.standardization
        extras["standardization"] = {
            "nodes": list(bundle.graph.nodes),
            "mean": mean.tolist(),
            "std": std.tolist(),
        }
    os.makedirs(args.out, exist_ok=True)
    log = (lambda m: print(f"epoch {m.epoch:4d} lr {m.lr:g} train {m.train_loss:.4f} "
                           f"test {m.test_metric:.4f}", flush=True)) if args.verbose else None
    result = train(flow, bundle, cfg, out_dir=args.out, extras=extras, log=log)
    artifacts = [os.path.join(args.out, n) for n in ("final.json", "metrics.csv")
                 if os.path.exists(os.path.join(args.out, n))]
    best = os.path.join(args.out, "best.json")
    if os.path.exists(best):
        artifacts.append(best)
    inputs = []
    if args.data:
        inputs = [os.path.join(args.data, "train.csv"), os.path.join(args.data, "test.csv")]
    _write_manifest(args.out, "train", _config_snapshot(args), args.seed, artifacts, inputs)
    if result.metrics:
        final = result.metrics[-1]
        print(f"finished {cfg.epochs} epochs: train loss {final.train_loss:.4f}, "
              f"test metric {final.test_metric:.4f} (best {result.best_metric:.4f} "
              f"at epoch {result.best_epoch})")
    else:
        print("finished 0 epochs: checkpoint of the initialized model written")
    return 0


def cmd_eval(args) -> int:
    flow, extras = load_checkpoint(args.checkpoint)
    bundle = _bundle_for_checkpoint(args, flow, extras)
    flow.refresh_power()
    objective = extras.get("objective", "mle")
    if objective == "elbo":
        observed = bundle.observed_columns(bundle.test)
        rng = np.random.default_rng(args.seed)
        values = evaluate_elbo(flow, bundle, observed, rng, args.elbo_samples)
        metric_name = "elbo"
    else:
        values = evaluate_log_prob(flow, bundle.test)
        metric_name = "log_likelihood"
    summary = {
        "metric": metric_name,
        "mean": float(values.mean()),
        "std": float(values.std()),
        "n": int(values.size),
        "checkpoint": args.checkpoint,
    }
    print(f"test {metric_name}: {summary['mean']:.4f} (n={summary['n']})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
        _write_manifest(args.out, "eval", _config_snapshot(args), args.seed,
                        [path], [args.checkpoint])
    return 0


def _inversion_inputs(args, flow: ResidualFlow, bundle: DatasetBundle):
    """Targets (z, cond) for inversion benchmarks on test data."""
    rng = np.random.default_rng(args.seed)
    n = min(args.n, bundle.test.shape[0]) if args.n else bundle.test.shape[0]
    if flow.kind == "inference":
        observed = bundle.observed_columns(bundle.test)[:n]
        eps = rng.standard_normal((n, flow.dim))
        z, _ = flow_forward_np(flow, eps, cond=observed, want_logdet=False)
        return z, observed
    x = bundle.test[:n]
    z, _ = flow_forward_np(flow, x, want_logdet=False)
    return z, None


def _write_inversion_csv(path, method, alphas, n_used, recon, micros):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_id,method,alpha,N_used,recon_error,micros\n")
        for i in range(len(n_used)):
            a = alphas[i] if hasattr(alphas, "__len__") else alphas
            a_txt = "" if a is None or np.isnan(a) else repr(float(a))
            fh.write(f"{i},{method},{a_txt},{int(n_used[i])},"
                     f"{float(recon[i])!r},{float(micros[i])!r}\n")


def cmd_invert(args) -> int:
    flow, extras = load_checkpoint(args.checkpoint)
    bundle = _bundle_for_checkpoint(args, flow, extras)
    flow.refresh_power()
    z, cond = _inversion_inputs(args, flow, bundle)
    cfg = InversionConfig(method=args.method, alpha=args.alpha,
                          max_iters=args.max_iters, tol=args.tol)
    _, report = invert_flow(flow, z, cond, cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "inversion.csv")
    n = z.shape[0]
    micros = np.full(n, report.wall_time / max(n, 1) * 1e6)
    alpha = args.alpha if args.method == "newton" else None
    _write_inversion_csv(path, args.method, [alpha] * n,
                         report.iterations.max(axis=1), report.recon_error, micros)
    _write_manifest(args.out, "invert", _config_snapshot(args), args.seed,
                    [path], [args.checkpoint])
    print(f"{int(report.converged.sum())}/{n} converged below {cfg.tol:g}; "
          f"batch wall time {report.wall_time*1e3:.2f} ms; table in {path}")
    return 0


def cmd_bench_invert(args) -> int:
    flow, extras = load_checkpoint(args.checkpoint)
    bundle = _bundle_for_checkpoint(args, flow, extras)
    flow.refresh_power()
    z, cond = _inversion_inputs(args, flow, bundle)
    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    if args.c_sweep:
        cs = [float(v) for v in args.c_sweep.split(",")]
        budgets = list(range(1, args.max_iters + 1))
        path = os.path.join(args.out, "c_sweep.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("c,method,iteration,mean_recon_error,max_recon_error\n")
            for c in cs:
                swept = flow.with_lip_bound(c)
                for method in ("banach", "newton") if args.method == "both" else (args.method,):
                    curve = reconstruction_curve(swept, z, cond, method=method,
                                                 alpha=args.alpha, budgets=budgets)
                    for n_it, mean_err, max_err in curve:
                        fh.write(f"{c!r},{method},{n_it},{mean_err!r},{max_err!r}\n")
        artifacts.append(path)
        print(f"wrote {path}")
    else:
        alphas = ([float(v) for v in args.alphas.split(",")] if args.alphas
                  else default_alpha_grid())
        budgets = ([int(v) for v in args.budgets.split(",")] if args.budgets
                   else list(range(1, args.max_iters + 1)))
        result = grid_search_inversion(flow, z, alphas, budgets, cond=cond,
                                       tol=args.tol, method=args.method)
        path = os.path.join(args.out, "grid_best.csv")
        n = z.shape[0]
        micros = np.full(n, result.batch_time / max(n, 1) * 1e6)
        _write_inversion_csv(path, args.method, result.best_alpha, result.best_n,
                             result.best_recon, micros)
        artifacts.append(path)
        cells = os.path.join(args.out, "grid_cells.csv")
        with open(cells, "w", encoding="utf-8") as fh:
            fh.write("alpha,N,converged,batch_seconds\n")
            for ai, a in enumerate(result.alphas):
                for ni, b in enumerate(result.iteration_budgets):
                    fh.write(f"{a!r},{b},{int(result.cell_converged[ai, ni])},"
                             f"{float(result.cell_time[ai, ni])!r}\n")
        artifacts.append(cells)
        conv = int((result.best_n > 0).sum())
        print(f"{conv}/{n} samples converged somewhere on the grid; best batch setting "
              f"alpha={result.overall_alpha}, N={result.overall_n} inverts "
              f"{result.overall_converged}/{n} in {result.batch_time*1e3:.2f} ms")
    _write_manifest(args.out, "bench-invert", _config_snapshot(args), args.seed,
                    artifacts, [args.checkpoint])
    return 0


def cmd_sample(args) -> int:
    flow, extras = load_checkpoint(args.checkpoint)
    flow.refresh_power()
    rng = np.random.default_rng(args.seed)
    graph = parse_graph(flow.source_graph_text)
    st = extras.get("standardization")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "samples.csv")
    inputs = [args.checkpoint]
    if flow.kind == "density":
        z = rng.standard_normal((args.n, flow.dim))
        x, report = invert_flow(flow, z, cfg=InversionConfig(tol=args.tol,
                                                             max_iters=args.max_iters))
        if st:
            x = x * np.array(st["std"]) + np.array(st["mean"])
        write_csv(path, x, graph.nodes)
        print(f"wrote {args.n} samples to {path} "
              f"({int(report.converged.sum())}/{args.n} inverted below {args.tol:g})")
    else:
        bundle = _bundle_for_checkpoint(args, flow, extras)
        observed = bundle.observed_columns(bundle.test)[:args.n]
        eps = rng.standard_normal((observed.shape[0], flow.dim))
        z, _ = flow_forward_np(flow, eps, cond=observed, want_logdet=False)
        full = bundle.assemble_full(z, observed)
        if bundle.standardization is not None:
            mean, std = bundle.standardization
            full = full * std + mean
        write_csv(path, full, graph.nodes)
        if args.data:
            inputs += [os.path.join(args.data, "test.csv")]
        print(f"wrote {z.shape[0]} posterior samples (with their observations) to {path}")
    _write_manifest(args.out, "sample", _config_snapshot(args), args.seed, [path], inputs)
    return 0


# ---------------------------------------------------------------- parser


def _add_data_opts(p, with_sizes=True):
    p.add_argument("--data", help="directory containing train.csv and test.csv")
    p.add_argument("--dataset", help="synthetic dataset name (arith, tree)")
    if with_sizes:
        p.add_argument("--n-train", type=int, default=10_000)
        p.add_argument("--n-test", type=int, default=5_000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grflow",
        description="Graph-structured invertible residual flows",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset as CSV")
    p.add_argument("--dataset", required=True)
    p.add_argument("--n-train", type=int, default=10_000)
    p.add_argument("--n-test", type=int, default=5_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a flow by MLE or ELBO")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--graph", help="graph file for custom architectures")
    p.add_argument("--blocks", type=int)
    p.add_argument("--width", type=int)
    _add_data_opts(p)
    p.add_argument("--objective", choices=("mle", "elbo"), default="mle")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--c", type=float, default=0.99, help="spectral norm bound")
    p.add_argument("--elbo-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--standardize", dest="standardize", action="store_true", default=True)
    p.add_argument("--no-standardize", dest="standardize", action="store_false")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test log-likelihood or ELBO of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_opts(p)
    p.add_argument("--elbo-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("invert", help="invert test points at fixed settings")
    p.add_argument("--checkpoint", required=True)
    _add_data_opts(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--method", choices=("newton", "banach"), default="newton")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("bench-invert", help="grid-search inversion settings or sweep c")
    p.add_argument("--checkpoint", required=True)
    _add_data_opts(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--method", choices=("newton", "banach", "both"), default="newton")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--alphas", help="comma list; default 0.1..1.9")
    p.add_argument("--budgets", help="comma list of per-block iteration budgets")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--c-sweep", help="comma list of Lipschitz bounds for error curves")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_invert)

    p = sub.add_parser("sample", help="draw samples from a trained flow")
    p.add_argument("--checkpoint", required=True)
    _add_data_opts(p, with_sizes=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    return parser


def _apply_config_file(argv: list[str]) -> list[str]:
    """key=value defaults from --config FILE; explicit flags still win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    try:
        path = argv[i + 1]
    except IndexError:
        raise UsageError("--config needs a file path") from None
    rest = argv[:i] + argv[i + 2:]
    extra: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            flag = "--" + key.replace("_", "-")
            if flag not in rest:
                if value.lower() in ("true", "false"):
                    if value.lower() == "true":
                        extra.append(flag)
                else:
                    extra.extend([flag, value])
    # insert config-derived options right after the subcommand
    return rest[:1] + extra + rest[1:] if rest else extra


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _apply_config_file(argv)
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        return args.func(args)
    except (UsageError, GraphError, DataError, MaskError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # numeric/runtime failures
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
