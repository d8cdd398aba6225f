"""Command-line entry point: ``servicetime <subcommand> [options]``.

Every subcommand reads an optional config file plus ``--set section.key=value``
overrides, writes its artifacts under ``--out`` and records a ``run.json``
manifest there (config, its hash, seed, package version and argv).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import VARIANTS, ConfigError, RunConfig, apply_override, read_config_file

log = logging.getLogger("servicetime")

PARAM_ALIASES = {
    "T": "model.window",
    "d": "model.d_model",
    "heads": "model.temporal_heads",
    "kernel": "model.conv_kernel",
    "lengthscale": "gpr.lengthscale",
    "lr": "train.lr",
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> RunConfig:
    data = read_config_file(args.config) if args.config else {}
    cfg = RunConfig.from_dict(data)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like section.key=value")
        cfg = apply_override(cfg, key.strip(), _parse_value(value.strip()))
    # common flags shadow config paths
    for flag, key in (("data", "paths.data"), ("regions", "paths.regions"),
                      ("checkpoint", "paths.checkpoint"), ("cache", "paths.cache")):
        value = getattr(args, flag, None)
        if value:
            cfg = apply_override(cfg, key, str(value))
    if getattr(args, "seed", None) is not None and args.command != "simulate":
        cfg = apply_override(cfg, "train.seed", args.seed)
    return cfg


def write_manifest(out: Path, cfg: RunConfig, args, extra: dict | None = None) -> None:
    doc = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "package_version": __version__,
        "config_sha256": cfg.digest(),
        "seed": cfg.train.seed,
        "config": cfg.to_dict(),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(extra or {}),
    }
    (out / "run.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# shared pipeline pieces


def region_map_for(cfg: RunConfig):
    from .ingest import RegionMap

    if cfg.paths.regions:
        return RegionMap.from_geojson(cfg.paths.regions, cfg.paths.region_id_property)
    col = cfg.ingest.schema.district
    if not cfg.paths.data or not col:
        raise ConfigError("paths.regions", "region polygons or a district column are required")
    with open(cfg.paths.data, encoding="utf-8-sig", newline="") as fh:
        labels = {row.get(col, "").strip() for row in csv.DictReader(fh)}
    return RegionMap.from_labels(sorted(l for l in labels if l))


def load_dataset(cfg: RunConfig):
    from .ingest import parse_requests

    if not cfg.paths.data:
        raise ConfigError("paths.data", "no request file configured")
    rmap = region_map_for(cfg)
    ds = parse_requests(cfg.paths.data, rmap, cfg.ingest.schema, cfg.ingest.type_vocabulary,
                        cfg.ingest.max_service_days)
    if not ds.requests:
        raise RuntimeError(f"no usable requests in {cfg.paths.data}")
    return ds, rmap


def llm_client(cfg: RunConfig):
    from .workload import LlmClientConfig, LlmWorkloadClient, default_template

    wc = cfg.workload
    template = Path(wc.prompt_template_path).read_text(encoding="utf-8") if wc.prompt_template_path \
        else default_template()
    import os

    return LlmWorkloadClient(LlmClientConfig(
        wc.endpoint, wc.model, template, wc.timeout, wc.max_retries, cfg.paths.cache, wc.parallelism,
        os.environ.get("LLM_API_KEY")))


def attach_workloads(ds, cfg: RunConfig):
    """Use the data file's workload column when present, else score (LLM or heuristic)."""
    from .predictor import ensure_workloads
    from .workload import score_requests

    if all(r.workload is not None for r in ds):
        return ds
    if cfg.workload.use_llm:
        client = llm_client(cfg)
        try:
            scores = score_requests(ds.requests, client)
        finally:
            client.close()
        return ds.with_workloads([s.w for s in scores])
    return ds.with_requests(ensure_workloads(ds.requests))


def experiment(cfg: RunConfig):
    from .evaluation import Experiment

    ds, rmap = load_dataset(cfg)
    ds = attach_workloads(ds, cfg)
    return Experiment.from_dataset(ds, cfg.ingest.train_fraction, rmap.M), rmap


def _write_report(report, out: Path, stem: str) -> None:
    report.to_csv(out / f"{stem}.csv")
    report.to_json(out / f"{stem}.json")
    print(report.table("MAPE"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(cfg, args, out: Path) -> None:
    from .panel import build_panel

    ds, rmap = load_dataset(cfg)
    ds.report.to_json(out / "ingest_report.json")
    panel = build_panel(ds, rmap.M, ds.type_vocabulary)
    panel.save(out / "panel.npz")
    (out / "regions.geojson").write_text(json.dumps(rmap.to_geojson()), encoding="utf-8")
    rep = ds.report
    print(f"{rep.retained} of {rep.total} rows retained ({rep.skipped} skipped, {rep.capped} capped, "
          f"{rep.unassigned} unassigned); panel {panel.shape}")


def cmd_score_workloads(cfg, args, out: Path) -> None:
    from .ingest import write_requests
    from .workload import score_requests

    ds, rmap = load_dataset(cfg)
    client = llm_client(cfg) if cfg.workload.use_llm else None
    try:
        scores = score_requests(ds.requests, client)
    finally:
        if client:
            client.close()
    scored = ds.with_workloads([s.w for s in scores])
    write_requests(scored, out / "requests_scored.csv", rmap)
    sources = {}
    for s in scores:
        sources[s.source] = sources.get(s.source, 0) + 1
    summary = {"scored": len(scores), "sources": sources,
               "network_calls": client.network_calls if client else 0}
    (out / "workload_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(json.dumps(summary))


def cmd_train(cfg, args, out: Path) -> None:
    exp, _ = experiment(cfg)
    model = exp.fit(cfg)
    ck = Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else out / "model.zip"
    model.save(ck)
    with open(out / "train_log.csv", "w", newline="") as fh:
        if model.history:
            w = csv.DictWriter(fh, fieldnames=list(model.history[0]))
            w.writeheader()
            w.writerows(model.history)
    exp.panel.save(out / "panel.npz")
    _write_report(exp.evaluate(model), out, "metrics_test")
    print(f"checkpoint written to {ck}")


def cmd_evaluate(cfg, args, out: Path) -> None:
    from .evaluation import report_from_predictions
    from .predictor import ServiceTimeModel

    if not cfg.paths.checkpoint:
        raise ConfigError("paths.checkpoint", "evaluate needs a checkpoint")
    model = ServiceTimeModel.load(cfg.paths.checkpoint)
    exp, _ = experiment(cfg)
    part = exp.test if args.split == "test" else exp.train
    reqs = [r for r in part if r.service_time_days is not None]
    preds = model.predict_requests(reqs, exp.panel)
    report = report_from_predictions(reqs, [p.service_time_days for p in preds],
                                     model.config.model.variant, exp.dataset.type_vocabulary)
    if args.baselines:
        report.extend(exp.train_mean_baseline())
        report.extend(exp.gpr_baseline(model))
    _write_report(report, out, f"metrics_{args.split}")


def cmd_ablate(cfg, args, out: Path) -> None:
    from .evaluation import run_ablation

    exp, _ = experiment(cfg)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    checkpoints = None
    if args.checkpoints:
        checkpoints = dict(item.split("=", 1) for item in args.checkpoints)
    report, models = run_ablation(exp, cfg, variants, checkpoints)
    if checkpoints is None:
        for v, m in models.items():
            m.save(out / f"model{v if v != 'full' else ''}.zip")
    _write_report(report, out, "ablation")


def cmd_sweep(cfg, args, out: Path) -> None:
    from .evaluation import run_sweep

    param = PARAM_ALIASES.get(args.param, args.param)
    values = [_parse_value(v) for v in args.values.split(",")]
    exp, _ = experiment(cfg)
    report = run_sweep(exp, cfg, param, values)
    report.to_csv(out / "sweep.csv")
    report.to_json(out / "sweep.json")
    for row in report.rows:
        print(f"{param}={row['value']}: MAE {row['MAE']:.4f}  RMSE {row['RMSE']:.4f}  MAPE {row['MAPE']:.2f}%")


def cmd_analyze(cfg, args, out: Path) -> None:
    from .evaluation import challenge_plots, pearson_demand_service
    from .panel import build_panel

    ds, rmap = load_dataset(cfg)
    panel = build_panel(ds, rmap.M, ds.type_vocabulary)
    paths = challenge_plots(panel, out, rmap, ds.requests)
    vocab = ds.type_vocabulary
    with open(out / "demand_service_pearson.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["service_type \\ demand_type", *vocab])
        for l, label in enumerate(vocab):
            w.writerow([label, *[pearson_demand_service(panel, k, l) for k in range(len(vocab))]])
    print("wrote " + ", ".join(sorted(p.name for p in paths.values())) + ", demand_service_pearson.csv")


def cmd_simulate(cfg, args, out: Path) -> None:
    from dataclasses import replace

    from .synth import SimConfig, simulate, verify_phenomena

    sim = SimConfig()
    if args.seed is not None:
        sim = replace(sim, seed=args.seed)
    if args.days is not None:
        sim = replace(sim, horizon_days=args.days)
    if args.no_spillover:
        sim = replace(sim, spillover=0.0)
    if args.separate:
        sim = sim.separate_departments()
    result = simulate(sim)
    result.to_csv(out / "requests.csv", out / "requests_truth.csv")
    (out / "regions.geojson").write_text(json.dumps(result.region_map.to_geojson()), encoding="utf-8")
    rep = verify_phenomena(result)
    doc = {"arrivals": result.arrivals, "pending": result.pending, **rep.as_dict()}
    (out / "phenomena.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    print(json.dumps(doc, indent=2))


def _serving_inputs(cfg):
    from .ingest import parse_requests
    from .panel import Panel, build_panel
    from .predictor import ServiceTimeModel

    if not cfg.paths.checkpoint:
        raise ConfigError("paths.checkpoint", "a checkpoint is required")
    model = ServiceTimeModel.load(cfg.paths.checkpoint)
    rmap = region_map_for(cfg) if (cfg.paths.regions or cfg.paths.data) else None
    if cfg.paths.data and cfg.paths.data.endswith(".npz"):
        panel = Panel.load(cfg.paths.data)
    elif cfg.paths.data:
        ds = parse_requests(cfg.paths.data, rmap, cfg.ingest.schema, model.type_vocabulary,
                            cfg.ingest.max_service_days)
        panel = build_panel(ds, model.region_count, model.type_vocabulary)
    else:
        raise ConfigError("paths.data", "a panel (.npz) or request file is required")
    return model, panel, rmap


def _cache_client(cfg):
    return llm_client(cfg) if cfg.paths.cache and Path(cfg.paths.cache).exists() else None


def cmd_serve(cfg, args, out: Path) -> None:
    from .service import PredictionService, serve

    model, panel, rmap = _serving_inputs(cfg)
    service = PredictionService(model, panel, rmap, _cache_client(cfg))
    serve(service, args.host or cfg.serve.host, args.port or cfg.serve.port)


def cmd_predict(cfg, args, out: Path) -> None:
    from .service import PredictionService

    model, panel, rmap = _serving_inputs(cfg)
    service = PredictionService(model, panel, rmap, _cache_client(cfg))
    if args.request:
        text = args.request
    elif args.input:
        text = Path(args.input).read_text(encoding="utf-8")
    else:
        text = sys.stdin.read()
    payload = json.loads(text)
    items = payload if isinstance(payload, list) else [payload]
    results = []
    for item in items:
        status, body = service.handle(item)
        results.append({"status": status, **body})
    doc = results if isinstance(payload, list) else results[0]
    (out / "predictions.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    print(json.dumps(doc, indent=2))
    if any(r["status"] != 200 for r in results):
        raise RuntimeError("one or more requests were rejected")


COMMANDS = {
    "ingest": cmd_ingest,
    "score-workloads": cmd_score_workloads,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "serve": cmd_serve,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML, YAML or JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=50 (repeatable)")
    common.add_argument("--out", help="output directory (default: paths.output)")
    common.add_argument("--data", help="request CSV (overrides paths.data)")
    common.add_argument("--regions", help="region GeoJSON (overrides paths.regions)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="servicetime", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", parents=[common], help="parse a request export into a panel")
    s = sub.add_parser("score-workloads", parents=[common], help="attach workload scores")
    s.add_argument("--cache", help="LLM cache file (overrides paths.cache)")
    s = sub.add_parser("train", parents=[common], help="train and checkpoint a model")
    s.add_argument("--checkpoint", help="checkpoint path (default: <out>/model.zip)")
    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    s.add_argument("--checkpoint")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--baselines", action="store_true", help="add train-mean and GP-only rows")
    s = sub.add_parser("ablate", parents=[common], help="compare full and ablated variants")
    s.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)}")
    s.add_argument("--checkpoints", nargs="*", metavar="VARIANT=PATH",
                   help="evaluate existing checkpoints instead of training")
    s = sub.add_parser("sweep", parents=[common], help="one-parameter sensitivity sweep")
    s.add_argument("--param", required=True, help=f"dotted config key or alias {sorted(PARAM_ALIASES)}")
    s.add_argument("--values", required=True, help="comma-separated values")
    sub.add_parser("analyze", parents=[common], help="exploratory plots and correlations")
    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--days", type=int)
    s.add_argument("--separate", action="store_true", help="one department per type")
    s.add_argument("--no-spillover", action="store_true")
    for name in ("serve", "predict"):
        s = sub.add_parser(name, parents=[common],
                           help="run the HTTP service" if name == "serve" else "predict from JSON")
        s.add_argument("--checkpoint")
        s.add_argument("--cache")
        if name == "serve":
            s.add_argument("--host")
            s.add_argument("--port", type=int)
        else:
            s.add_argument("--request", help="inline JSON request (object or list)")
            s.add_argument("--input", help="file with a JSON request")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(argv) if argv is not None else None
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = Path(args.out or cfg.paths.output)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, cfg, args)
        COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc} (key: {exc.key})", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
