"""Command line entry point: ``run``, ``ablate-inputs``, ``ablate-depth`` and ``report``.

Exit status is 0 when every cell succeeds, 2 when some cells failed and 1
when the config, manifest or output directory cannot be set up.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import runner

EXIT_OK, EXIT_SETUP, EXIT_PARTIAL = 0, 1, 2


def _status(records) -> int:
    return EXIT_PARTIAL if any(not r.ok for r in records) else EXIT_OK


def _cmd_run(args) -> int:
    cfg = runner.load_config(args.config)
    records = runner.run_experiment(cfg, workers=args.workers, cache_dir=args.cache)
    runner.emit_report(records, args.out, cfg)
    print(runner.rmse_table(runner.aggregate(records)), end="")
    return _status(records)


def _cmd_ablate_inputs(args) -> int:
    cfg = runner.load_config(args.config)
    records = runner.run_input_ablation(cfg, workers=args.workers, cache_dir=args.cache)
    runner.emit_report(records, args.out, cfg)
    print(runner.rmse_table(runner.aggregate(records)), end="")
    return _status(records)


def _cmd_ablate_depth(args) -> int:
    cfg = runner.load_config(args.config)
    try:
        layers = [int(v) for v in args.layers.split(",") if v.strip()]
    except ValueError as err:
        raise runner.SetupError(f"--layers must be comma separated integers: {args.layers!r}") from err
    records, table = runner.flow_depth_ablation(cfg, layers, workers=args.workers)
    paths = runner.emit_report(records, args.out, cfg)
    runner._write_csv(paths["records"].parent / "depth_table.csv", table)
    for row in table:
        print(json.dumps(row, sort_keys=True))
    return _status(records)


def _cmd_report(args) -> int:
    records = runner.load_records(args.records)
    out = args.out or args.records
    runner.emit_report(records, out)
    agg = runner.aggregate(records)
    print(runner.rmse_table(agg), end="")
    print(runner.uncertainty_table(agg), end="")
    return _status(records)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridflow", description="Flow-based uncertainty benchmark runner")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="results"):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        sp.add_argument("--cache", default=None, help="directory for reusable trained flows")

    sp = sub.add_parser("run", help="run the benchmark sweep")
    common(sp)
    sp.set_defaults(func=_cmd_run)
    sp = sub.add_parser("ablate-inputs", help="x+z / x / z predictor input ablation")
    common(sp, "results_inputs")
    sp.set_defaults(func=_cmd_ablate_inputs)
    sp = sub.add_parser("ablate-depth", help="flow depth ablation")
    common(sp, "results_depth")
    sp.add_argument("--layers", default="2,4,6,8,10,12")
    sp.set_defaults(func=_cmd_ablate_depth)
    sp = sub.add_parser("report", help="re-aggregate an emitted records directory")
    sp.add_argument("--records", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except runner.SetupError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SETUP


if __name__ == "__main__":
    sys.exit(main())
