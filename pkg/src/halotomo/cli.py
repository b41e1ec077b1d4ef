"""Command line entry point: ``halotomo <stage> --config cfg.yaml --out DIR``.

Exit codes: 0 success, 1 validation error, 2 analysis failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io, pipeline
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .estimate import FitError, fit_gradient_vector, histogram_stats, ramsey_differential
from .reconstruct import ClassificationError, DegenerateFitError, halo_statistics

EXIT_OK, EXIT_VALIDATION, EXIT_ANALYSIS, EXIT_IO = 0, 1, 2, 3


class AnalysisFailure(RuntimeError):
    pass


class Run:
    """Collects outputs and timings for the manifest of one command."""

    def __init__(self, command: str, cfg: ExperimentConfig, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}
        self._t = time.perf_counter()

    def lap(self, name: str):
        now = time.perf_counter()
        self.timings[name] = self.timings.get(name, 0.0) + now - self._t
        self._t = now

    def add(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def manifest(self) -> Path:
        doc = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "versions": {"halotomo": __version__, "numpy": np.__version__, "python": sys.version.split()[0]},
            "timings_s": self.timings,
            "outputs": [{"path": p.name, "sha256": io.file_sha256(p)} for p in self.outputs],
        }
        return io.write_json(self.out / f"manifest_{self.command}.json", doc)


def _tau_meta(cfg, i, tau, kind):
    return {"tau_index": i, "tau": tau, "scheme": cfg.sequence.scheme, "config_hash": cfg.hash(), "stage": kind}


def cmd_simulate(cfg: ExperimentConfig, out: Path, threads: int, truth: bool = True) -> dict:
    run = Run("simulate", cfg, out)
    rows = []
    for i, tau, shots, events in pipeline.simulate(cfg, threads, keep_truth=truth):
        run.lap("simulate")
        meta = _tau_meta(cfg, i, tau, "simulate")
        if truth:
            run.add(io.write_truth(out / f"truth_tau{i:03d}.txt", shots, meta))
        run.add(io.write_events(out / f"events_tau{i:03d}.txt", events, meta))
        run.lap("write")
        rows.append({"tau_index": i, "tau": tau, "shots": cfg.sequence.shots_per_tau,
                     "atoms": int(sum(s.n_atoms for s in shots)) if truth else None,
                     "events": len(events)})
    summary = {"command": "simulate", "per_tau": rows, "total_events": int(sum(r["events"] for r in rows))}
    run.add(io.write_json(out / "summary_simulate.json", summary))
    run.manifest()
    return summary


def _inputs(paths, out: Path, pattern: str) -> list[Path]:
    files: list[Path] = []
    for p in (paths or [out]):
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.glob(pattern)))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"input {p} does not exist")
    if not files:
        raise FileNotFoundError(f"no {pattern} inputs found")
    return files


def cmd_reconstruct(cfg: ExperimentConfig, out: Path, inputs) -> dict:
    run = Run("reconstruct", cfg, out)
    rows = []
    for path in _inputs(inputs, out, "events_tau*.txt"):
        events, meta = io.read_events(path)
        run.lap("read")
        if len(events) == 0:
            raise AnalysisFailure(f"{path.name}: no events to reconstruct")
        try:
            cloud, diag = pipeline.reconstruct(cfg, events)
        except (ClassificationError, DegenerateFitError) as exc:
            raise AnalysisFailure(f"{path.name}: {exc}") from exc
        stats = halo_statistics(cloud, radial_window=(0.8, 1.2))
        run.lap("reconstruct")
        i = meta.get("tau_index", len(rows))
        cmeta = {**meta, "stage": "reconstruct"}
        run.add(io.write_cloud(out / f"cloud_tau{i:03d}.txt", cloud, cmeta))
        run.lap("write")
        rows.append({"input": path.name, "tau_index": i, "tau": meta.get("tau"), "n_atoms": len(cloud),
                     "shots": int(len(np.unique(cloud.shot_id))), "diagnostics": diag,
                     "halo_statistics": stats.as_dict()})
    summary = {"command": "reconstruct", "per_tau": rows}
    run.add(io.write_json(out / "summary_reconstruct.json", summary))
    run.manifest()
    return summary


def _load_clouds(inputs, out: Path):
    clouds = []
    for path in _inputs(inputs, out, "cloud_tau*.txt"):
        cloud, meta = io.read_cloud(path)
        if "tau" not in meta:
            raise io.FormatError(f"{path}: header lacks the tau value")
        clouds.append((float(meta["tau"]), cloud))
    clouds.sort(key=lambda x: x[0])
    if sum(len(c) for _, c in clouds) == 0:
        raise AnalysisFailure("input clouds are empty")
    return clouds


def _flag_counts(amap) -> dict:
    counts: dict[str, int] = {}
    for fl in amap.flags:
        for f in fl:
            counts[f] = counts.get(f, 0) + 1
    return dict(sorted(counts.items()))


def cmd_tomography(cfg: ExperimentConfig, out: Path, inputs) -> dict:
    run = Run("tomography", cfg, out)
    clouds = _load_clouds(inputs, out)
    run.lap("read")
    per_bin, whole = pipeline.tomography(cfg, clouds)
    run.lap("fit")
    run.add(io.write_map(out / "field_map.txt", per_bin, {"config_hash": cfg.hash()}))
    run.add(io.write_map(out / "field_integrated.txt", whole, {"config_hash": cfg.hash()}))
    ok = per_bin.valid()
    summary = {"command": "tomography", "n_bins": len(per_bin.grid), "n_valid": int(ok.sum()),
               "flag_counts": _flag_counts(per_bin), "n_shots": per_bin.n_shots,
               "integrated": {"B": whole.value[0], "stderr": whole.stderr[0], "flags": whole.flags[0],
                              "details": whole.details[0]}}
    try:
        h = histogram_stats(per_bin.value[ok])
        summary["histogram"] = {"mean": h.mean, "std": h.std, "mean_stderr": h.mean_stderr,
                                "counts": h.counts, "edges": h.edges}
        summary["mean_bin_stderr"] = float(np.mean(per_bin.stderr[ok]))
    except ValueError as exc:
        summary["histogram"] = {"error": str(exc)}
    run.lap("summary")
    run.add(io.write_json(out / "summary_tomography.json", summary))
    run.manifest()
    if whole.flags[0] or not np.isfinite(whole.value[0]):
        raise AnalysisFailure(f"halo-integrated Ramsey fit failed: {whole.flags[0]}")
    return summary


def cmd_gradiometry(cfg: ExperimentConfig, out: Path, inputs) -> dict:
    run = Run("gradiometry", cfg, out)
    clouds = _load_clouds(inputs, out)
    run.lap("read")
    gmap = pipeline.gradiometry(cfg, clouds)
    run.lap("fit")
    run.add(io.write_map(out / "gradient_map.txt", gmap, {"config_hash": cfg.hash()}))
    summary = {"command": "gradiometry", "n_bins": len(gmap.grid), "n_valid": int(gmap.valid().sum()),
               "flag_counts": _flag_counts(gmap), "n_shots": gmap.n_shots,
               "per_bin": [{"bin": b, **d} if d else {"bin": b} for b, d in enumerate(gmap.details)]}
    failure = None
    try:
        v = fit_gradient_vector(gmap)
        summary["gradient_vector"] = {"g": v.gradient, "stderr": v.stderr, "magnitude": v.magnitude,
                                      "magnitude_stderr": v.magnitude_stderr, "axis": v.axis, "chi2": v.chi2,
                                      "ndof": v.ndof, "p_value": v.p_value, "n_bins": v.n_bins, "flags": v.flags}
    except FitError as exc:
        summary["gradient_vector"] = {"error": str(exc)}
        failure = str(exc)
    run.lap("summary")
    run.add(io.write_json(out / "summary_gradiometry.json", summary))
    run.manifest()
    if failure:
        raise AnalysisFailure(f"gradient vector fit failed: {failure}")
    return summary


def cmd_resolution(cfg: ExperimentConfig, out: Path) -> dict:
    run = Run("resolution", cfg, out)
    res = pipeline.resolution_table(cfg)
    run.lap("compute")
    c, mc, p = res["closed"], res["monte_carlo"], res["params"]
    run.add(io.write_rows(
        out / "resolution.txt",
        ("S", "mean", "width", "far_mean", "far_width", "mc_mean", "mc_width", "mc_n_eff"),
        ("m", "m", "m", "m", "m", "m", "m", "-"),
        [(p["S"], c["mean"], c["width"], c["far_field"]["mean"], c["far_field"]["width"], mc["mean"],
          mc["width"], mc["n_effective"])], {"params": p}))
    summary = {"command": "resolution", **res}
    run.add(io.write_json(out / "summary_resolution.json", summary))
    run.manifest()
    return summary


def cmd_bounds(cfg: ExperimentConfig, out: Path) -> dict:
    run = Run("bounds", cfg, out)
    res = pipeline.bounds_table(cfg)
    run.add(io.write_rows(out / "bounds.txt", ("eta", "ramsey", "bell", "sql_ideal", "heisenberg"),
                          ("-", "rad", "rad", "rad", "rad"),
                          [(r["eta"], r["ramsey"], r["bell"], r["sql_ideal"], r["heisenberg"]) for r in res["rows"]],
                          {"n_atoms": res["n_atoms"]}))
    summary = {"command": "bounds", **res}
    run.add(io.write_json(out / "summary_bounds.json", summary))
    run.manifest()
    return summary


def _table(summary: dict) -> str:
    """Short human-readable rendering of a command summary."""
    cmd = summary["command"]
    lines = []
    if cmd == "simulate":
        lines.append("tau_index  tau[s]  shots  events")
        lines += [f"{r['tau_index']:9d}  {r['tau']:.6g}  {r['shots']:5d}  {r['events']}" for r in summary["per_tau"]]
    elif cmd == "reconstruct":
        lines.append("tau_index  atoms  rms_width  ambiguous")
        for r in summary["per_tau"]:
            lines.append(f"{r['tau_index']:9d}  {r['n_atoms']:5d}  {r['halo_statistics']['radial_rms_width']:.4f}"
                         f"  {r['diagnostics'].get('ambiguous_fraction', float('nan')):.2e}")
    elif cmd == "tomography":
        it = summary["integrated"]
        lines.append(f"integrated B = {it['B']:.6f} +/- {it['stderr']:.2e} G  flags={it['flags'] or '-'}")
        h = summary.get("histogram", {})
        if "mean" in h:
            lines.append(f"bins: {summary['n_valid']}/{summary['n_bins']} valid, mean {h['mean']:.6f} G, "
                         f"std {h['std']:.2e} G, mean stderr {summary['mean_bin_stderr']:.2e} G")
        lines.append(f"flags: {summary['flag_counts'] or '-'}")
    elif cmd == "gradiometry":
        v = summary["gradient_vector"]
        if "error" in v:
            lines.append(f"gradient vector: {v['error']}")
        else:
            g = np.asarray(v["g"])
            lines.append(f"|grad B| = {v['magnitude']:.4f} +/- {v['magnitude_stderr']:.4f} G/m  "
                         f"axis = ({v['axis'][0]:+.4f}, {v['axis'][1]:+.4f}, {v['axis'][2]:+.4f})")
            lines.append(f"g = {np.array2string(g, precision=4)} G/m  chi2/ndof = {v['chi2']:.1f}/{v['ndof']}  "
                         f"flags={v['flags'] or '-'}")
        lines.append(f"bins: {summary['n_valid']}/{summary['n_bins']} valid  flags: {summary['flag_counts'] or '-'}")
    elif cmd == "resolution":
        c, mc = summary["closed"], summary["monte_carlo"]
        lines.append("quantity  closed  monte_carlo  far_field")
        lines.append(f"mean[m]   {c['mean']:.6e}  {mc['mean']:.6e}  {c['far_field']['mean']:.6e}")
        lines.append(f"width[m]  {c['width']:.6e}  {mc['width']:.6e}  {c['far_field']['width']:.6e}")
    elif cmd == "bounds":
        lines.append("eta  ramsey  bell")
        lines += [f"{r['eta']:.4f}  {r['ramsey']:.4f}  {r['bell']:.4f}" for r in summary["rows"]]
        lines.append(f"Bell bound beats the ideal N={summary['n_atoms']} SQL above eta = "
                     f"{summary['bell_beats_ideal_sql_above_eta']:.12f}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="halotomo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML experiment config (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker processes (0 = all cores)")
        p.add_argument("--format", choices=("table", "json"), default="table", help="stdout rendering")

    p = sub.add_parser("simulate", help="simulate shots and detector events")
    common(p)
    p.add_argument("--no-truth", action="store_true", help="skip writing per-atom ground truth")
    for name, helptext, pattern in (("reconstruct", "events -> normalised halo clouds", "events_tau*.txt"),
                                    ("tomography", "Ramsey field map from clouds", "cloud_tau*.txt"),
                                    ("gradiometry", "parity gradient map from clouds", "cloud_tau*.txt")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("inputs", nargs="*", type=Path,
                       help=f"input files or directories (default: {pattern} in --out)")
    for name, helptext in (("resolution", "spatial resolution closed forms vs Monte Carlo"),
                           ("bounds", "phase-sensitivity bounds vs detection efficiency")):
        common(sub.add_parser(name, help=helptext))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else config_from_dict({})
        if args.seed is not None:
            d = cfg.to_dict()
            d["seed"] = args.seed
            cfg = config_from_dict(d)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    threads = pipeline.resolve_threads(args.threads)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            summary = cmd_simulate(cfg, args.out, threads, truth=not args.no_truth)
        elif args.command == "reconstruct":
            summary = cmd_reconstruct(cfg, args.out, args.inputs)
        elif args.command == "tomography":
            summary = cmd_tomography(cfg, args.out, args.inputs)
        elif args.command == "gradiometry":
            summary = cmd_gradiometry(cfg, args.out, args.inputs)
        elif args.command == "resolution":
            summary = cmd_resolution(cfg, args.out)
        else:
            summary = cmd_bounds(cfg, args.out)
    except AnalysisFailure as exc:
        print(f"analysis failure: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.format == "json":
        sys.stdout.write(io.dumps_json(summary))
    else:
        print(_table(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
