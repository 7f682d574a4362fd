"""Command-line entry points: gen-data, train, eval, export-grid, plot.

Exit codes: 0 success, 2 usage or input error, 3 numerical abort. Every
command writes one ``run_manifest.json`` (or ``<out>.manifest.json`` for
single-file outputs) listing inputs, outputs, seeds and artifact hashes.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from . import __version__
from . import occupancy_eval as oe
from . import scenegen as sg
from . import trainer as tr

log = logging.getLogger("semocc")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
CONFIG_ENV = "SEMOCC_CONFIG"


class InputError(Exception):
    """Bad flags, missing files or unparsable inputs (exit code 2)."""


@dataclass
class RunManifest:
    command: str
    config_fingerprint: str = ""
    seeds: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    artifact_hashes: dict = field(default_factory=dict)
    status: str = "ok"
    version: str = __version__

    def add_outputs(self, paths, root: Path):
        for p in sorted(Path(x) for x in paths):
            rel = str(p.relative_to(root)) if p.is_relative_to(root) else str(p)
            self.outputs.append(rel)
            self.artifact_hashes[rel] = file_sha256(p)

    def write(self, path: Path):
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _files_under(root: Path, exclude=("run_manifest.json",)):
    return [p for p in sorted(root.rglob("*")) if p.is_file() and p.name not in exclude]


# ------------------------------------------------------------------ data helpers

def scene_dirs(data: Path) -> list:
    """A scene directory, or a root holding several (one per sub-directory)."""
    data = Path(data)
    if not data.exists():
        raise InputError(f"data path {data} does not exist")
    if _is_scene_dir(data):
        return [data]
    dirs = [d for d in sorted(data.iterdir()) if d.is_dir() and _is_scene_dir(d)]
    if not dirs:
        raise InputError(f"no scenes found under {data}")
    return dirs


def _is_scene_dir(d: Path) -> bool:
    m = d / "manifest.json"
    if not m.is_file():
        return False
    try:
        return "views" in json.loads(m.read_text())
    except json.JSONDecodeError:
        return False


def load_generation_spec(path) -> sg.GenerationSpec:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read spec file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InputError(f"spec file {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise InputError(f"spec file {path}: expected a mapping at top level")
    try:
        return sg.GenerationSpec.from_dict(raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise InputError(f"spec file {path}: {exc}") from exc


def resolve_config(path) -> tuple:
    """(TrainConfig, path used); ``SEMOCC_CONFIG`` replaces the path when set."""
    env = os.environ.get(CONFIG_ENV)
    chosen = env or path
    if chosen is None:
        return tr.TrainConfig(), None
    try:
        return tr.load_config(chosen), str(chosen)
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from exc
    except (yaml.YAMLError, TypeError, ValueError) as exc:
        raise InputError(f"config {chosen}: {exc}") from exc


def parse_bands(text: str) -> list:
    try:
        return [oe.RangeBand.parse(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(f"bad --bands value {text!r}: {exc}") from exc


def load_checkpoint_or_fail(path) -> tr.Checkpoint:
    if not Path(path).is_file():
        raise InputError(f"checkpoint {path} not found")
    try:
        return tr.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load checkpoint {path}: {exc}") from exc


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    spec = load_generation_spec(args.spec) if args.spec else sg.GenerationSpec()
    if args.num_scenes < 1:
        raise InputError("--num-scenes must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("gen-data", seeds={"seed": args.seed, "num_scenes": args.num_scenes})
    if args.spec:
        man.inputs.append(str(args.spec))
    t0 = time.perf_counter()
    for i in range(args.num_scenes):
        seed = args.seed + i
        scene = sg.build_scene(seed, spec)
        sg.save_scene(scene, sg.render_rig(scene), out / f"scene_{seed:05d}")
        log.info("scene %d written", seed)
    man.config_fingerprint = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True)
                                            .encode()).hexdigest()[:16]
    man.add_outputs(_files_under(out), out)
    man.wall_clock_s = time.perf_counter() - t0
    man.write(out / "run_manifest.json")
    return EXIT_OK


LOSS_LOG_FIELDS = ("step", "loss", "lr", "photometric", "smoothness", "n_patches",
                   "n_excluded", "grad_norm")


def cmd_train(args) -> int:
    cfg, cfg_path = resolve_config(args.config)
    dirs = scene_dirs(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = []
    for d in dirs:
        scene, views = sg.load_scene(d)
        dataset.append(tr.SceneData(views, tuple(scene.category_names), scene))
    resume = load_checkpoint_or_fail(args.resume) if args.resume else None
    tr.save_config(cfg, out / "config.yaml")
    man = RunManifest("train", cfg.fingerprint(), {"seed": cfg.seed},
                      [str(d) for d in dirs] + ([cfg_path] if cfg_path else []))
    t0 = time.perf_counter()
    log_path = out / "loss_log.csv"
    f = open(log_path, "w", newline="")
    writer = csv.writer(f)
    writer.writerow(LOSS_LOG_FIELDS)

    def on_step(it, loss, d):
        writer.writerow([it, repr(loss), repr(d.lr), repr(d.photometric), repr(d.smoothness),
                         d.n_patches, d.n_excluded, repr(d.grad_norm)])
        if it % 50 == 0:
            log.info("step %d loss %.5f", it, loss)

    try:
        ckpt = tr.fit(cfg, dataset, resume=resume, out_dir=out, on_step=on_step)
    except tr.NumericalAbort as exc:
        f.close()
        print(f"numerical abort: {exc}", file=sys.stderr)
        man.status = "aborted"
        man.wall_clock_s = time.perf_counter() - t0
        man.add_outputs(_files_under(out), out)
        man.write(out / "run_manifest.json")
        return EXIT_NUMERIC
    f.close()
    tr.save_checkpoint(ckpt, out / "checkpoint.npz")
    man.wall_clock_s = time.perf_counter() - t0
    man.add_outputs(_files_under(out), out)
    man.write(out / "run_manifest.json")
    return EXIT_OK


def _grid_for(view, band, args):
    return oe.build_eval_grid(band, tuple(args.slices), args.spacing, view.intrinsics, view.pose,
                              half_width=args.half_width)


def _ground_truth(scene, views, grid, method: str, eps: float):
    if method == "exact":
        return sg.gt_occupancy(scene, grid)
    return oe.gt_from_depth_surfaces(views, grid, eps)


def evaluate_scene(ckpt, scene, views, bands, args) -> oe.MetricReport:
    ref = views[0]
    out = {}
    for band in bands:
        grid = _grid_for(ref, band, args)
        eps = args.spacing / 2
        pred = oe.predict_occupancy(ckpt, ref, grid, args.tau, seed=args.seed)
        gt = _ground_truth(scene, views, grid, args.gt, eps)
        vis = sg.visibility_mask(scene, ref.intrinsics, ref.pose, grid, eps)
        out[band.name] = oe.compute_metrics(pred, gt, vis, band_name=band.name)
    return oe.MetricReport(out, _eval_meta(ckpt, args))


def _eval_meta(ckpt, args) -> dict:
    return {"tau": args.tau, "slices": list(args.slices), "spacing": args.spacing,
            "ground_truth": args.gt, "seed": args.seed,
            "lateral_extent": "frustum" if args.half_width is None else args.half_width,
            "config_fingerprint": ckpt.fingerprint, "iteration": ckpt.iteration}


def cmd_eval(args) -> int:
    ckpt = load_checkpoint_or_fail(args.checkpoint)
    bands = parse_bands(args.bands)
    dirs = scene_dirs(args.data)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest("eval", ckpt.fingerprint, {"seed": args.seed},
                      [str(args.checkpoint)] + [str(d) for d in dirs])
    t0 = time.perf_counter()
    reports = []
    for d in dirs:
        scene, views = sg.load_scene(d)
        rep = evaluate_scene(ckpt, scene, views, bands, args)
        rep.meta["scene"] = d.name
        (out / f"{d.name}.json").write_text(rep.to_json())
        reports.append(rep)
    agg = oe.aggregate_reports(reports)
    agg.meta.update(_eval_meta(ckpt, args))
    agg.meta["scenes"] = [d.name for d in dirs]
    (out / "aggregate.json").write_text(agg.to_json())
    man.wall_clock_s = time.perf_counter() - t0
    man.add_outputs(_files_under(out), out)
    man.write(out / "run_manifest.json")
    return EXIT_OK


def cmd_export_grid(args) -> int:
    ckpt = load_checkpoint_or_fail(args.checkpoint)
    band = parse_bands(args.band)[0]
    d = scene_dirs(args.data)[0]
    scene, views = sg.load_scene(d)
    grid = _grid_for(views[0], band, args)
    t0 = time.perf_counter()
    pred = oe.predict_occupancy(ckpt, views[0], grid, args.tau, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    oe.save_grid(out, grid, pred)
    written = [out]
    if args.points:
        oe.save_point_cloud(args.points, grid, pred)
        written.append(Path(args.points))
    man = RunManifest("export-grid", ckpt.fingerprint, {"seed": args.seed},
                      [str(args.checkpoint), str(d)])
    man.wall_clock_s = time.perf_counter() - t0
    man.add_outputs(written, out.parent)
    man.write(out.with_name(out.name + ".manifest.json"))
    return EXIT_OK


def cmd_plot(args) -> int:
    from . import plots
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if args.report:
        rpath = Path(args.report)
        if rpath.is_dir():
            rpath = rpath / "aggregate.json"
        if not rpath.is_file():
            raise InputError(f"report {rpath} not found")
        try:
            report = oe.MetricReport.from_dict(json.loads(rpath.read_text()))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"cannot parse report {rpath}: {exc}") from exc
        written = plots.metric_bars(report, out)
        man = RunManifest("plot", report.meta.get("config_fingerprint", ""), {}, [str(rpath)])
    else:
        if not (args.checkpoint and args.data):
            raise InputError("plot needs --report, or --checkpoint with --data")
        ckpt = load_checkpoint_or_fail(args.checkpoint)
        d = scene_dirs(args.data)[0]
        scene, views = sg.load_scene(d)
        written = []
        for band in parse_bands(args.bands):
            grid = _grid_for(views[0], band, args)
            pred = oe.predict_occupancy(ckpt, views[0], grid, args.tau, seed=args.seed)
            gt = sg.gt_occupancy(scene, grid)
            written += plots.slice_images(grid, pred, gt, out)
        man = RunManifest("plot", ckpt.fingerprint, {"seed": args.seed},
                          [str(args.checkpoint), str(d)])
    man.wall_clock_s = time.perf_counter() - t0
    man.add_outputs(written, out)
    man.write(out / "run_manifest.json")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_grid_flags(p, bands_flag="--bands", default_bands="4:20,4:50"):
    p.add_argument(bands_flag, default=default_bands, help="comma list of d_min:d_max")
    p.add_argument("--tau", type=float, default=0.5, help="occupancy threshold on density")
    p.add_argument("--slices", type=float, nargs="+", default=list(oe.DEFAULT_SLICES),
                   help="slice heights above ground (m)")
    p.add_argument("--spacing", type=float, default=0.2, help="grid spacing (m)")
    p.add_argument("--half-width", type=float, default=None,
                   help="fixed lateral half width (m); default follows the field of view")
    p.add_argument("--seed", type=int, default=0, help="chunk-plan seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semocc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scenes and rig renders")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-scenes", type=int, default=1)
    p.add_argument("--spec", default=None, help="YAML generation spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the density field")
    p.add_argument("--config", default=None, help=f"YAML config (overridden by ${CONFIG_ENV})")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="occupancy metrics per range band")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output directory for report files")
    p.add_argument("--gt", choices=("exact", "carving"), default="exact")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-grid", help="write a packed occupancy grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--points", default=None, help="optional text point cloud of occupied cells")
    _add_grid_flags(p, "--band", "4:20")
    p.set_defaults(func=cmd_export_grid)

    p = sub.add_parser("plot", help="metric bar charts or top-down slice images")
    p.add_argument("--report", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    _add_grid_flags(p, default_bands="4:20")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except sg.InfeasibleSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except tr.NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
