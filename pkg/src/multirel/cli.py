"""Command-line front end: generate, ingest, fit, report, recover.

Exit status is 0 on success, 2 when flags or configuration fail validation and
1 when a run fails.  A ``--config`` JSON file supplies defaults for any flag
(keys are the long flag names with dashes turned into underscores); flags
given on the command line win.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from . import engine, ingest, synthetic
from .fileio import atomic_write_json, atomic_write_text
from .model import HyperParams, ModelError
from .samplers import Algo8Config, ChainState, SliceConfig, rng_stream

log = logging.getLogger("multirel")


class ValidationError(Exception):
    pass


DEFAULTS = {
    "seed": 0,
    "out_dir": ".",
    "workers": 1,
    # generate
    "edges": 1000,
    "slices": 52,
    # ingest
    "preset": "csv",
    "delimiter": None,
    "source_col": None,
    "target_col": None,
    "date_col": None,
    "date_format": None,
    "weight_col": None,
    "header": False,
    "max_malformed_rate": 0.01,
    "granularity": "weekly",
    "window": None,
    "top_k": 1000,
    "per_year": False,
    # fit / recover
    "chains": 3,
    "iters": 5000,
    "burn_in": 1000,
    "thin": 10,
    "checkpoint_every": 100,
    "m_aux": 3,
    "resume": False,
    "stop_after": None,
    "alpha": None,
    "init": "default",
    # report
    "delta_draws": 0,
}


COMMAND_DEFAULTS = {"recover": {"chains": 1, "burn_in": 0}}

# config-file keys that have no default but are still meaningful
EXTRA_KEYS = {"profile", "hypers", "panel", "truth", "map", "inputs", "verbose"}


def load_profiles() -> dict:
    text = resources.files("multirel").joinpath("profiles.json").read_text(encoding="utf-8")
    return json.loads(text)


def resolve_hypers(opts: dict, default_profile: str) -> HyperParams:
    profiles = load_profiles()
    name = opts.get("profile") or default_profile
    if name not in profiles:
        raise ValidationError(f"unknown profile {name!r}; choose from {sorted(profiles)}")
    spec = dict(profiles[name])
    if opts.get("hypers"):
        spec = opts["hypers"]
    if opts.get("alpha") is not None:
        spec = dict(spec, alpha=opts["alpha"])
    try:
        return HyperParams.from_dict(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"invalid hyperparameters: {exc}") from None


def _options(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    opts = dict(DEFAULTS)
    opts.update(COMMAND_DEFAULTS.get(args.command, {}))
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - set(DEFAULTS) - EXTRA_KEYS)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        opts.update(cfg)
    opts.update({k: v for k, v in vars(args).items() if v is not None and v != []})
    _positive(opts, "workers")
    return opts


def _positive(opts, *keys):
    for k in keys:
        if not isinstance(opts[k], int) or opts[k] < 1:
            raise ValidationError(f"--{k.replace('_', '-')} must be a positive integer")


def _run_config(opts, hypers) -> engine.RunConfig:
    _positive(opts, "chains", "iters", "thin", "m_aux")
    try:
        return engine.RunConfig(
            hypers=hypers, n_chains=opts["chains"], n_iterations=opts["iters"],
            burn_in=opts["burn_in"], thin=opts["thin"], seed=opts["seed"],
            algo8=Algo8Config(opts["m_aux"]), slice=SliceConfig(),
            checkpoint_every=opts["checkpoint_every"])
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _read_panel(path):
    if not path:
        raise ValidationError("--panel is required")
    try:
        return ingest.read_panel(path)
    except OSError as exc:
        raise ValidationError(f"cannot read panel: {exc}") from None


# -- subcommands -----------------------------------------------------------------

def cmd_generate(opts) -> int:
    _positive(opts, "edges", "slices")
    hypers = resolve_hypers(opts, "synthetic-2013")
    for msg in hypers.lint():
        log.warning("hyperparameter lint: %s", msg)
    truth = synthetic.generate(opts["edges"], opts["slices"], hypers,
                               rng_stream(opts["seed"], 0))
    out = Path(opts["out_dir"])
    ingest.write_panel(truth.panel, out / "panel.txt")
    truth.save(out / "truth.json")
    log.info("wrote %s and %s (G=%d)", out / "panel.txt", out / "truth.json", truth.partition.G)
    return 0


def _event_format(opts) -> ingest.EventFormat:
    base = ingest.GDELT_FORMAT if opts["preset"] == "gdelt" else ingest.EventFormat()
    fields = {}
    for key in ("delimiter", "source_col", "target_col", "date_col", "date_format",
                "weight_col"):
        if opts[key] is not None:
            fields[key] = opts[key]
    if "delimiter" in fields:
        fields["delimiter"] = fields["delimiter"].encode().decode("unicode_escape")
    return ingest.EventFormat(**{**base.__dict__, **fields, "header": bool(opts["header"]),
                                 "max_malformed_rate": opts["max_malformed_rate"]})


def cmd_ingest(opts) -> int:
    if not opts.get("inputs"):
        raise ValidationError("at least one input file is required ('-' for stdin)")
    if not opts["window"]:
        raise ValidationError("--window START..END is required")
    _positive(opts, "top_k")
    try:
        binning = ingest.BinningSpec.parse(opts["granularity"], opts["window"])
    except ingest.IngestError as exc:
        raise ValidationError(str(exc)) from None
    fmt = _event_format(opts)
    records, report = [], []
    for name in opts["inputs"]:
        if name == "-":
            parsed = ingest.parse_events(sys.stdin, fmt)
        else:
            with open(name, encoding="utf-8", newline="") as fh:
                parsed = ingest.parse_events(fh, fmt)
        records += parsed.records
        report.append({"input": name, **parsed.summary()})
    out = Path(opts["out_dir"])
    if opts["per_year"]:
        windows = [(f"panel_{y}.txt", ingest.BinningSpec(binning.granularity, lo, hi))
                   for y, lo, hi in ingest.year_windows(binning.start, binning.end)]
    else:
        windows = [("panel.txt", binning)]
    panels = []
    for fname, spec in windows:
        panel = ingest.top_k_edges(ingest.aggregate(records, spec), opts["top_k"])
        ingest.write_panel(panel, out / fname)
        panels.append({"file": fname, "bins": str(spec), "T": panel.T, "edges": panel.n_edges})
    atomic_write_json(out / "ingest_report.json", {"inputs": report, "panels": panels})
    return 0


def cmd_fit(opts) -> int:
    panel = _read_panel(opts.get("panel"))
    hypers = resolve_hypers(opts, "gdelt-2013")
    for msg in hypers.lint():
        log.warning("hyperparameter lint: %s", msg)
    cfg = _run_config(opts, hypers)
    out = Path(opts["out_dir"])
    if opts["stop_after"] is not None:
        for c in range(cfg.n_chains):
            engine.fit_chain(panel, cfg, c, out, resume=opts["resume"],
                             stop_after=opts["stop_after"])
        log.info("stopped after iteration %d; continue with --resume", opts["stop_after"])
        return 0
    best, results = engine.fit(panel, cfg, out, resume=opts["resume"],
                               workers=opts["workers"])
    engine.write_map_summary(out / "map.json", engine.map_summary(best, panel, cfg, results))
    log.info("MAP sample: chain %d iteration %d joint %.6f G=%d", best.chain,
             best.iteration, best.joint_logprob, best.G)
    return 0


def cmd_report(opts) -> int:
    if not opts.get("map"):
        raise ValidationError("--map is required")
    panel = _read_panel(opts.get("panel"))
    try:
        record, hypers, summary = engine.load_map_summary(opts["map"])
    except OSError as exc:
        raise ValidationError(f"cannot read MAP summary: {exc}") from None
    if [tuple(e) for e in summary["edges"]] != panel.edges:
        raise ValidationError("MAP summary edges do not match the panel")
    if not isinstance(opts["delta_draws"], int) or opts["delta_draws"] < 0:
        raise ValidationError("--delta-draws must be a nonnegative integer")
    reports = engine.posterior_group_report(record, panel, hypers, opts["delta_draws"],
                                            rng_stream(opts["seed"], 0))
    out = Path(opts["out_dir"])
    index = []
    for rank, rep in enumerate(reports):
        stem = f"group_{rank:03d}"
        atomic_write_text(out / f"{stem}_series.csv", engine.format_series_table(rep, panel))
        atomic_write_text(out / f"{stem}_deviation.csv", engine.format_deviation_table(rep))
        index.append({"rank": rank, "label": rep.label, "size": rep.size,
                      "edges": [list(e) for e in rep.edges]})
    atomic_write_json(out / "groups.json", {"joint_logprob": record.joint_logprob,
                                            "groups": index})
    return 0


METRIC_COLUMNS = ["iteration", "chain", "rate_err", "state_err", "vi"]


def recovery_metrics(truth: synthetic.GroundTruth, labels, paths, rates) -> tuple:
    return (synthetic.base_rate_error(truth.base_rates, rates),
            synthetic.state_error(truth.partition.assignment, truth.paths, labels, paths),
            synthetic.variation_of_information(truth.partition.assignment, labels))


def truth_state(truth: synthetic.GroundTruth, hypers: HyperParams) -> ChainState:
    return ChainState(truth.panel, hypers, truth.partition.assignment, truth.paths,
                      truth.base_rates, truth.theta, truth.hypers.gamma_shape,
                      truth.hypers.gamma_scale)


def cmd_recover(opts) -> int:
    panel = _read_panel(opts.get("panel"))
    if not opts.get("truth"):
        raise ValidationError("--truth is required")
    try:
        truth = synthetic.GroundTruth.load(opts["truth"], panel)
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"cannot read truth sidecar: {exc}") from None
    if opts.get("profile") or opts.get("hypers"):
        hypers = resolve_hypers(opts, "synthetic-2013")
    else:
        spec = truth.hypers.to_dict()
        if opts.get("alpha") is not None:
            spec["alpha"] = opts["alpha"]
        hypers = HyperParams.from_dict(spec)
    if opts["init"] not in ("default", "truth"):
        raise ValidationError("--init must be 'default' or 'truth'")
    cfg = _run_config(opts, hypers)
    out = Path(opts["out_dir"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    bests = []
    for c in range(cfg.n_chains):
        state = truth_state(truth, hypers) if opts["init"] == "truth" else None
        run = engine.ChainRun(panel, cfg, c, state)
        s = run.state
        writer.writerow([0, c, *map(repr, recovery_metrics(truth, s.labels, s.paths, s.rates))])
        samples = io.StringIO()
        for rec in run:
            m = recovery_metrics(truth, rec.partition.assignment, rec.paths, rec.base_rates)
            writer.writerow([rec.iteration, c, *map(repr, m)])
            samples.write(json.dumps(rec.to_dict()) + "\n")
        atomic_write_text(out / f"samples.chain{c}.ndjson", samples.getvalue())
        bests.append(run.best)
    atomic_write_text(out / "metrics.csv", buf.getvalue())
    best = engine.select_map(bests)
    engine.write_map_summary(out / "map.json", engine.map_summary(best, panel, cfg))
    return 0


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, help="random seed (default 0)")
    shared.add_argument("--config", help="JSON file with default values for any flag")
    shared.add_argument("--out-dir", help="output directory (default: current directory)")
    shared.add_argument("--workers", type=int,
                        help="worker processes for running chains in parallel (default 1)")
    shared.add_argument("-v", "--verbose", action="store_true", default=None,
                        help="log progress to stderr")

    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--profile", help="named hyperparameter profile "
                       "(synthetic-2013 or gdelt-2013)")
    hyper.add_argument("--alpha", type=float, help="override the CRP concentration")

    mcmc = argparse.ArgumentParser(add_help=False)
    mcmc.add_argument("--chains", type=int, help="number of independent chains (default 3)")
    mcmc.add_argument("--iters", type=int, help="MCMC iterations per chain (default 5000)")
    mcmc.add_argument("--burn-in", type=int, help="iterations discarded before recording "
                      "(default 1000)")
    mcmc.add_argument("--thin", type=int, help="record every n-th post-burn-in iteration "
                      "(default 10)")
    mcmc.add_argument("--m-aux", type=int, help="auxiliary groups per assignment update "
                      "(default 3)")

    p = argparse.ArgumentParser(prog="multirel", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[shared, hyper],
                       help="simulate a synthetic panel plus truth sidecar")
    g.add_argument("--edges", type=int, help="number of directed edges (default 1000)")
    g.add_argument("--slices", type=int, help="number of time slices (default 52)")

    i = sub.add_parser("ingest", parents=[shared],
                       help="bin delimited event records into an edge-count panel")
    i.add_argument("inputs", nargs="*", help="event files ('-' reads stdin)")
    i.add_argument("--preset", choices=["csv", "gdelt"],
                   help="column layout preset: csv = source,target,YYYY-MM-DD; "
                        "gdelt = GDELT 1.0 tab-separated export")
    i.add_argument("--delimiter", help="field delimiter (escapes such as \\t allowed)")
    i.add_argument("--source-col", type=int, help="0-based source actor column")
    i.add_argument("--target-col", type=int, help="0-based target actor column")
    i.add_argument("--date-col", type=int, help="0-based date column")
    i.add_argument("--date-format", help="strptime format of the date column")
    i.add_argument("--weight-col", type=int,
                   help="optional integer column counted instead of 1 per record")
    i.add_argument("--header", action="store_true", default=None,
                   help="skip the first line of each input")
    i.add_argument("--max-malformed-rate", type=float,
                   help="fail if more than this fraction of lines is malformed (default 0.01)")
    i.add_argument("--granularity", choices=["daily", "weekly", "monthly"],
                   help="time bin size (default weekly)")
    i.add_argument("--window", help="half-open date window START..END (ISO dates)")
    i.add_argument("--top-k", type=int, help="keep the k most active edges (default 1000)")
    i.add_argument("--per-year", action="store_true", default=None,
                   help="write one panel per calendar year of the window")

    f = sub.add_parser("fit", parents=[shared, hyper, mcmc],
                       help="run MCMC chains and write traces plus the MAP summary")
    f.add_argument("--panel", help="panel file to fit")
    f.add_argument("--checkpoint-every", type=int,
                   help="write a checkpoint every n iterations (default 100, 0 = end only)")
    f.add_argument("--resume", action="store_true", default=None,
                   help="continue chains from their checkpoints in --out-dir")
    f.add_argument("--stop-after", type=int,
                   help="checkpoint and stop every chain after this iteration")

    r = sub.add_parser("report", parents=[shared],
                       help="write per-group series and deviation tables for a MAP sample")
    r.add_argument("--map", help="MAP summary written by fit")
    r.add_argument("--panel", help="panel the MAP sample was fitted to")
    r.add_argument("--delta-draws", type=int,
                   help="posterior deviation draws for 90%% intervals (default 0 = none)")

    c = sub.add_parser("recover", parents=[shared, hyper, mcmc],
                       help="fit a synthetic panel and track error against its truth")
    c.add_argument("--panel", help="synthetic panel file")
    c.add_argument("--truth", help="truth sidecar written by generate")
    c.add_argument("--init", choices=["default", "truth"],
                   help="start from the default initialisation or the true latents")
    return p


COMMANDS = {"generate": cmd_generate, "ingest": cmd_ingest, "fit": cmd_fit,
            "report": cmd_report, "recover": cmd_recover}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = _options(args)
        return COMMANDS[opts["command"]](opts)
    except ValidationError as exc:
        print(f"multirel {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ingest.IngestError, engine.EngineError, ModelError, ArithmeticError,
            OSError) as exc:
        print(f"multirel {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
