"""Command-line entry point.

Subcommands::

    meshfuse generate     --out DIR [--config FILE] [--seed N]
    meshfuse calibrate    --data DIR --out DIR [--config FILE] [--source truth|estimate] [--no-ransac]
    meshfuse run          --data DIR --out DIR [--config FILE] [--strategy dp|dah]
    meshfuse eval-ranges  --data DIR --out DIR [--bin-width W] [--gate G]
    meshfuse mesh-rate    --nodes N [--slot DT]

Failures print one line ``error: <kind>: <message>`` to stderr and exit with
a nonzero status.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .calibration import CalibrationError
from .core import ContractError
from .mesh import rate_report
from .scenario import calibrate_dataset, generate_dataset, run_scenario
from .sim import evaluate_ranges

log = logging.getLogger("meshfuse")


class CliError(Exception):
    def __init__(self, kind: str, message: str) -> None:
        super().__init__(message)
        self.kind = kind


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _config(args):
    try:
        return io.read_config(Path(args.config) if args.config else None)
    except ContractError as exc:
        raise CliError("config", str(exc)) from None


def cmd_generate(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = _out_dir(args.out)
    dataset = generate_dataset(cfg)
    io.write_dataset(out, dataset, cfg)
    rep = rate_report(len(dataset.setup.node_ids), cfg.slot_duration)
    log.info("%s", rep["note"])
    print(f"wrote {len(dataset.imu)} IMU, {len(dataset.baro)} baro, {len(dataset.ranges)} range rows to {out}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    ds = io.read_dataset(Path(args.data))
    out = _out_dir(args.out)
    ransac = not args.no_ransac
    results = calibrate_dataset(ds, cfg, source=args.source, ransac=ransac)
    records, rows, errors = [], [], []
    for aid, entry in results.items():
        res = entry["result"]
        truth = ds.setup.anchors.get(aid)
        if res is None:
            rows.append((aid, "", entry["failure"] or "failed"))
            continue
        records.append(io.calibration_record(res))
        err = float(np.linalg.norm(res.position - truth)) if truth is not None else None
        if err is not None:
            errors.append(err)
        rows.append((aid, "" if err is None else io.fmt_value(err), ""))
        prob = entry["problem"]
        header = ["t", "reference_id", "px", "py", "pz", "range"] + (["inlier"] if ransac else [])
        with open(out / f"samples_{aid}.csv", "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for k in range(len(prob)):
                vals = [io.fmt_value(prob.t[k]), str(prob.ref_ids[k]), *(io.fmt_value(x) for x in prob.refs[k]),
                        io.fmt_value(prob.z[k])]
                if ransac:
                    vals.append("1" if res.inlier_mask[k] else "0")
                fh.write(",".join(vals) + "\n")
    with open(out / "calibration.json", "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2)
        fh.write("\n")
    with open(out / "errors.csv", "w", encoding="utf-8") as fh:
        fh.write("anchor_id,error,failure\n")
        for aid, err, fail in rows:
            fh.write(f"{aid},{err},{fail}\n")
        if errors:
            fh.write(f"average,{io.fmt_value(np.mean(errors))},\n")
    for aid, err, fail in rows:
        print(f"anchor {aid}: " + (f"error {float(err):.3f} m" if err else (fail or "no truth")))
    if errors:
        print(f"average error {np.mean(errors):.3f} m over {len(errors)} anchors")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.strategy is not None:
        cfg = dataclasses.replace(cfg, strategy=args.strategy)
    ds = io.read_dataset(Path(args.data))
    ids = set(ds.setup.unknown_ids)
    for _, trig in cfg.triggers:
        missing = set(trig) - ids
        if missing:
            raise CliError("config", f"trigger ids {sorted(missing)} are not unknown anchors of the dataset")
    out = _out_dir(args.out)
    report = run_scenario(cfg, ds)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    io.write_csv(out / "timing.csv", ["t", "kind", "seconds", "n_instances", "state_dim"], [])
    with open(out / "timing.csv", "a", encoding="utf-8") as fh:
        for s in report.timings:
            fh.write(f"{io.fmt_value(s.t)},{s.kind},{io.fmt_value(s.seconds)},{s.n_instances},{s.state_dim}\n")
    io.write_poses(out / "trajectory.csv", report.times, report.positions, report.quaternions)
    print(f"{report.strategy}: position RMSE {report.position_rmse:.3f} m, "
          f"orientation RMSE {report.orientation_rmse_deg:.2f} deg, "
          f"mean anchor error {report.mean_final_anchor_error():.3f} m")
    return 0


def cmd_eval_ranges(args) -> int:
    data = Path(args.data)
    if not (data / io.FILES["poses"]).exists():
        raise CliError("io", f"missing ground truth file {data / io.FILES['poses']}")
    setup, spec, _ = io.read_setup(data)
    gt = io.read_poses(data / io.FILES["poses"], spec)
    ranges = io.read_ranges(data / io.FILES["ranges"])
    ev = evaluate_ranges(ranges, gt, setup.anchors, setup.tags, gate=args.gate, bin_width=args.bin_width)
    out = _out_dir(args.out)
    with open(out / "pairs.csv", "w", encoding="utf-8") as fh:
        fh.write("id_initiator,id_responder,gamma,sigma,n,n_total,n_outliers,gamma_true\n")
        for (a, b), st in ev.pairs.items():
            g_true = setup.biases.get(a, b)
            gt_s = "" if g_true is None else io.fmt_value(g_true[0])
            fh.write(f"{a},{b},{io.fmt_value(st.gamma)},{io.fmt_value(st.sigma)},{st.n},{st.n_total},{st.n_outliers},{gt_s}\n")
    with open(out / "histograms.csv", "w", encoding="utf-8") as fh:
        fh.write("id_initiator,id_responder,bin_low,bin_high,count\n")
        for (a, b), st in ev.pairs.items():
            counts, edges = st.histogram
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                fh.write(f"{a},{b},{io.fmt_value(lo)},{io.fmt_value(hi)},{int(c)}\n")
    print(f"{len(ev.pairs)} pairs evaluated, {ev.skipped} samples skipped")
    return 0


def cmd_mesh_rate(args) -> int:
    rep = rate_report(args.nodes, args.slot)
    rep["ratio"] = str(rep["ratio"])
    print(json.dumps(rep, indent=2))
    return 0


class _Parser(argparse.ArgumentParser):
    """Usage errors in the same one-line format as runtime errors."""

    def error(self, message: str):
        self.exit(2, f"error: usage: {_one_line(message)}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshfuse", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("calibrate", help="calibrate unknown anchors from a whole flight")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--config")
    c.add_argument("--source", choices=("truth", "estimate"), default="truth",
                   help="tag positions from ground truth or from a fusion run")
    c.add_argument("--no-ransac", action="store_true")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("run", help="fusion with in-flight anchor calibration")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--strategy", choices=("dp", "dah"))
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval-ranges", help="per-pair range bias and noise")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--bin-width", type=float, default=0.01)
    e.add_argument("--gate", type=float, default=5.0)
    e.set_defaults(func=cmd_eval_ranges)

    m = sub.add_parser("mesh-rate", help="cycle rate of a fully meshed schedule")
    m.add_argument("--nodes", type=int, required=True)
    m.add_argument("--slot", type=float, default=0.010)
    m.set_defaults(func=cmd_mesh_rate)
    return p


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split())


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        kind, msg = exc.kind, str(exc)
    except FileNotFoundError as exc:
        kind, msg = "io", str(exc)
    except io.DataFormatError as exc:
        kind, msg = "data", str(exc)
    except CalibrationError as exc:
        kind, msg = "calibration", str(exc)
    except ContractError as exc:
        kind, msg = "config", str(exc)
    except OSError as exc:
        kind, msg = "io", f"{exc.filename}: {exc.strerror}" if exc.filename else str(exc)
    print(f"error: {kind}: {_one_line(msg)}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
