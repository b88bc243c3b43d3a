"""Command-line workbench around the codec.

Subcommands cover the full experiment loop: prepare training blocks,
train the lambda sweep, encode/decode clouds, evaluate rate-distortion,
compare curves, inspect analytic costs, and plot. Every command that
writes an artifact drops a JSON manifest next to it recording inputs,
outputs, configuration and content hashes.

Exit codes: 0 success, 1 usage, 2 data, 3 internal.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, codec, costmodel, geometry, metrics
from .errors import DataError, InternalError, UsageError
from .models import ModelConfig

CACHE_ENV = "VOXPCC_CACHE"


def cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV)
    if root:
        return Path(root)
    return Path.home() / ".cache" / "voxpcc"


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through the usage
    # category instead so the exit-code contract holds.
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files

def load_config(path) -> dict[str, str]:
    """Flat "key = value" settings; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}")
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{ln}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def apply_overrides(cfg: dict[str, str], sets: list[str]) -> dict[str, str]:
    for item in sets or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def _parse_float(cfg, key, default):
    try:
        return float(cfg.get(key, default))
    except ValueError:
        raise UsageError(f"bad number for {key}: {cfg[key]!r}")


def _parse_int(cfg, key, default):
    try:
        return int(cfg.get(key, default))
    except ValueError:
        raise UsageError(f"bad integer for {key}: {cfg[key]!r}")


def schedule_from_config(cfg: dict[str, str]) -> codec.TrainSchedule:
    raw = cfg.get("lambdas", "5e-5,1e-4,2e-4,3e-4")
    try:
        lambdas = tuple(float(p) for p in raw.split(","))
    except ValueError:
        raise UsageError(f"bad lambda list: {raw!r}")
    return codec.TrainSchedule(
        lambdas=lambdas,
        max_steps=_parse_int(cfg, "max_steps", 400),
        batch_size=_parse_int(cfg, "batch_size", 8),
        val_every=_parse_int(cfg, "val_every", 50),
        val_batches=_parse_int(cfg, "val_batches", 10),
        patience=_parse_int(cfg, "patience", 3),
        lr_main=_parse_float(cfg, "lr_main", 1e-4),
        lr_prior=_parse_float(cfg, "lr_prior", 1e-3),
        seed=_parse_int(cfg, "seed", 0),
    )


# ---------------------------------------------------------------------------
# manifests

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(anchor, command: str, argv: list[str],
                   config: dict | None, seeds: dict | None,
                   inputs: list, outputs: list) -> Path:
    """Record what produced an artifact; written as <anchor>.manifest.json."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": config or {},
        "seeds": seeds or {},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    path = Path(str(anchor) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# rd csv

CSV_FIELDS = ("lambda", "bpp", "d1_psnr", "d2_psnr")


def write_rd_csv(path, points: list[metrics.RDPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for p in sorted(points, key=lambda q: (q.lam, q.bpp)):
            w.writerow([f"{p.lam:g}", f"{p.bpp:.6f}",
                        f"{p.d1_psnr:.4f}", f"{p.d2_psnr:.4f}"])


def read_rd_csv(path) -> list[metrics.RDPoint]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}")
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                [f.strip() for f in reader.fieldnames] != list(CSV_FIELDS):
            raise DataError(f"{path}: expected header "
                            f"{','.join(CSV_FIELDS)}")
        out = []
        for ln, row in enumerate(reader, start=2):
            try:
                out.append(metrics.RDPoint(float(row["lambda"]),
                                           float(row["bpp"]),
                                           float(row["d1_psnr"]),
                                           float(row["d2_psnr"])))
            except (TypeError, ValueError):
                raise DataError(f"{path}:{ln}: malformed row")
    if not out:
        raise DataError(f"{path}: no rate-distortion rows")
    return out


# ---------------------------------------------------------------------------
# svg plotting

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b")


def render_svg(series: list[tuple[str, list[tuple[float, float]]]],
               xlabel: str, ylabel: str) -> str:
    """Self-contained line plot; one polyline with markers per series."""
    width, height = 640, 440
    ml, mr, mt, mb = 68, 16, 16, 52
    xs = [x for _, pts in series for x, _ in pts]
    ys = [y for _, pts in series for _, y in pts]
    if not xs:
        raise UsageError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    xpad = (x1 - x0) * 0.05 or max(abs(x0), 1.0) * 0.05
    ypad = (y1 - y0) * 0.05 or max(abs(y0), 1.0) * 0.05
    x0, x1, y0, y1 = x0 - xpad, x1 + xpad, y0 - ypad, y1 + ypad

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             '<g font-family="sans-serif" font-size="12">']
    # axes
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" '
                 f'y2="{height - mb}" stroke="black"/>')
    parts.append(f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" '
                 f'y2="{height - mb}" stroke="black"/>')
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        parts.append(f'<line x1="{px(fx):.1f}" y1="{height - mb}" '
                     f'x2="{px(fx):.1f}" y2="{height - mb + 5}" '
                     f'stroke="black"/>')
        parts.append(f'<text x="{px(fx):.1f}" y="{height - mb + 18}" '
                     f'text-anchor="middle">{fx:.3g}</text>')
        parts.append(f'<line x1="{ml - 5}" y1="{py(fy):.1f}" x2="{ml}" '
                     f'y2="{py(fy):.1f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{py(fy) + 4:.1f}" '
                     f'text-anchor="end">{fy:.4g}</text>')
    parts.append(f'<text x="{(ml + width - mr) / 2}" y="{height - 14}" '
                 f'text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="16" y="{(mt + height - mb) / 2}" '
                 f'text-anchor="middle" transform="rotate(-90 16 '
                 f'{(mt + height - mb) / 2})">{ylabel}</text>')
    for k, (label, pts) in enumerate(series):
        color = _PALETTE[k % len(_PALETTE)]
        pts = sorted(pts)
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" '
                         f'r="3" fill="{color}"/>')
        parts.append(f'<rect x="{ml + 10}" y="{mt + 6 + 16 * k}" '
                     f'width="12" height="3" fill="{color}"/>')
        parts.append(f'<text x="{ml + 28}" y="{mt + 12 + 16 * k}">'
                     f'{label}</text>')
    parts.append("</g></svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# subcommands

def _cloud_from_args(path, resolution) -> geometry.PointCloud:
    try:
        return geometry.load_point_cloud(path, resolution)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}")


def cmd_prepare(args, argv) -> int:
    rng = np.random.default_rng(args.seed)
    clouds = []
    inputs: list[str] = []
    if args.mesh_dir:
        mesh_dir = Path(args.mesh_dir)
        paths = sorted(mesh_dir.rglob("*.off"))
        if not paths:
            raise DataError(f"no .off meshes under {mesh_dir}")
        for p in paths:
            mesh = geometry.load_mesh(p)
            pts = geometry.sample_mesh_surface(mesh, args.samples, rng)
            clouds.append(geometry.voxelize(pts, args.resolution))
            inputs.append(str(p))
    else:
        kinds = geometry.SYNTHETIC_KINDS
        for i in range(args.synthetic):
            clouds.append(geometry.synthetic_cloud(
                kinds[i % len(kinds)], args.resolution, rng))
    blocks = codec.blocks_from_clouds(clouds, args.block_size)
    if not blocks:
        raise DataError("no occupied blocks produced")
    counts = np.array([b.sum() for b in blocks])
    order = np.argsort(-counts, kind="stable")[:args.keep]
    blocks = [blocks[i] for i in sorted(order)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    codec.save_block_archive(out, blocks)
    write_manifest(out, "prepare", argv,
                   {"resolution": args.resolution,
                    "block_size": args.block_size,
                    "samples": args.samples, "keep": args.keep},
                   {"seed": args.seed}, inputs, [out])
    print(f"wrote {len(blocks)} blocks of {args.block_size}^3 to {out}")
    return 0


def cmd_train(args, argv) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    model_cfg = ModelConfig.from_mapping(cfg)
    schedule = schedule_from_config(cfg)
    blocks = codec.load_block_archive(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, results = codec.train(blocks, model_cfg, schedule,
                             checkpoint_dir=str(out_dir),
                             log=lambda s: print(s, flush=True))
    history = [{"lambda": r.lam, "steps": r.steps,
                "step_losses": r.step_losses,
                "val_losses": r.val_losses,
                "checkpoint": r.checkpoint} for r in results]
    hist_path = out_dir / "train_history.json"
    hist_path.write_text(json.dumps(history, indent=2) + "\n",
                         encoding="utf-8")
    outputs = [r.checkpoint for r in results] + [hist_path]
    write_manifest(out_dir / "train", "train", argv, cfg,
                   {"seed": schedule.seed}, [args.data], outputs)
    for r in results:
        print(f"lambda={r.lam:g}: {r.steps} steps, "
              f"final val={r.val_losses[-1] if r.val_losses else math.nan:.3f},"
              f" checkpoint={r.checkpoint}")
    return 0


def cmd_encode(args, argv) -> int:
    network, meta, digest = codec.load_checkpoint(args.checkpoint)
    cloud = _cloud_from_args(args.input, args.resolution)
    lam = float(meta.get("lambda", "0") or 0)
    data = codec.encode_point_cloud(cloud, network, lam=lam,
                                    checkpoint_digest=digest,
                                    jobs=args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    write_manifest(out, "encode", argv, None, None,
                   [args.input, args.checkpoint], [out])
    bpp = 8 * len(data) / max(1, len(cloud))
    print(f"encoded {len(cloud)} points to {len(data)} bytes "
          f"({bpp:.3f} bpp) at {out}")
    return 0


def cmd_decode(args, argv) -> int:
    network, _, digest = codec.load_checkpoint(args.checkpoint)
    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc.strerror}")
    cloud = codec.decode_point_cloud(data, network,
                                     checkpoint_digest=digest,
                                     jobs=args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    geometry.save_point_cloud(out, cloud, ascii_format=args.ascii)
    write_manifest(out, "decode", argv, None, None,
                   [args.input, args.checkpoint], [out])
    print(f"decoded {len(cloud)} points to {out}")
    return 0


def cmd_evaluate(args, argv) -> int:
    network, _, _ = codec.load_checkpoint(args.checkpoint)
    original = _cloud_from_args(args.original, args.resolution)
    points = []
    for bs_path in args.bitstream:
        try:
            data = Path(bs_path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read {bs_path}: {exc.strerror}")
        points.append(codec.evaluate_rd(original, data, network))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rd_csv(out, points)
    write_manifest(out, "evaluate", argv, None, None,
                   [args.original, args.checkpoint] + args.bitstream,
                   [out])
    for p in sorted(points, key=lambda q: q.lam):
        print(f"lambda={p.lam:g} bpp={p.bpp:.4f} "
              f"d1={p.d1_psnr:.2f}dB d2={p.d2_psnr:.2f}dB")
    return 0


def cmd_bd(args, argv) -> int:
    ref = read_rd_csv(args.reference)
    test = read_rd_csv(args.test)
    ref_curve = metrics.RDCurve("reference", ref)
    test_curve = metrics.RDCurve("test", test)
    rate = metrics.bd_rate(ref_curve, test_curve, metric=args.metric)
    psnr = metrics.bd_psnr(ref_curve, test_curve, metric=args.metric)
    print(f"bd_rate_{args.metric} = {rate:+.2f}%")
    print(f"bd_psnr_{args.metric} = {psnr:+.3f} dB")
    return 0


def _report_row(name: str) -> tuple[str, bool, bool]:
    rep = costmodel.model_cost(name)
    disp = costmodel.REFERENCE_DISPLAY[name]
    p_ok = costmodel.display_match(rep.params, disp["params"])
    m_ok = costmodel.display_match(rep.macs, disp["macs"])
    p_str = (f"{rep.params:,} -> {costmodel.format_like(rep.params, disp['params'])} "
             f"vs {disp['params']} {'ok' if p_ok else 'FLAG'}")
    m_str = (f"{rep.macs:,} -> {costmodel.format_like(rep.macs, disp['macs'])} "
             f"vs {disp['macs']} {'ok' if m_ok else 'FLAG'}")
    return f"{name:<14} params {p_str}\n{'':<14} ops    {m_str}", p_ok, m_ok


def cmd_analyze_cost(args, argv) -> int:
    if args.report:
        flags = 0
        for name in costmodel.MODEL_PRESETS:
            row, p_ok, m_ok = _report_row(name)
            print(row)
            flags += (not p_ok) + (not m_ok)
        print(f"{flags} cell(s) flagged against the recorded reference "
              f"figures" if flags else "all cells match")
        return 0
    if args.resolve is not None:
        for cfg in costmodel.resolve_config(args.resolve):
            print(f"channels={cfg.channels} latent={cfg.latent_channels} "
                  f"hyper={cfg.hyper_channels}")
        return 0
    if args.config:
        cfg = apply_overrides(load_config(args.config), args.set)
        report = costmodel.model_cost(ModelConfig.from_mapping(cfg))
    else:
        report = costmodel.model_cost(args.model)
    name_w = max(len(l.name) for l in report.layers)
    print(f"model: {report.model}")
    for layer in report.layers:
        print(f"  {layer.name:<{name_w}} params {layer.params:>10,} "
              f"ops {layer.macs:>14,}")
    print(f"  {'total':<{name_w}} params {report.params:>10,} "
          f"ops {report.macs:>14,}")
    return 0


def cmd_plot(args, argv) -> int:
    series = []
    for path in args.csv:
        pts = read_rd_csv(path)
        key = (lambda p: p.d1_psnr) if args.metric == "d1" \
            else (lambda p: p.d2_psnr)
        series.append((Path(path).stem,
                       [(p.bpp, key(p)) for p in pts]))
    svg = render_svg(series, "rate (bits per input point)",
                     f"{args.metric} PSNR (dB)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    write_manifest(out, "plot", argv, None, None, args.csv, [out])
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> _Parser:
    p = _Parser(prog="voxpcc",
                description="learned voxel point-cloud compression "
                            "workbench")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="build a training block archive")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--mesh-dir", help="directory of .off meshes")
    group.add_argument("--synthetic", type=int, metavar="N",
                       help="generate N synthetic clouds instead")
    sp.add_argument("--resolution", type=int, required=True)
    sp.add_argument("--block-size", type=int, required=True)
    sp.add_argument("--samples", type=int, default=1 << 19,
                    help="surface samples per mesh")
    sp.add_argument("--keep", type=int, default=4000,
                    help="keep the densest K blocks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=str(cache_dir() / "blocks.vpca"))
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="run the lambda sweep")
    sp.add_argument("--data", required=True, help="block archive")
    sp.add_argument("--config", required=True)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out", default=str(cache_dir() / "run"))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("encode", help="compress a cloud")
    sp.add_argument("--input", required=True, help="ply cloud")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="reconstruct a cloud")
    sp.add_argument("--input", required=True, help="bitstream")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ascii", action="store_true",
                    help="write ascii ply")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("evaluate", help="measure bitstreams into a csv")
    sp.add_argument("--original", required=True, help="ply cloud")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bitstream", action="append", required=True)
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--out", required=True, help="csv path")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bd", help="compare two rate-distortion csvs")
    sp.add_argument("--reference", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--metric", choices=("d1", "d2"), default="d1")
    sp.set_defaults(func=cmd_bd)

    sp = sub.add_parser("analyze-cost", help="analytic parameter/op counts")
    sp.add_argument("--model", choices=costmodel.MODEL_PRESETS,
                    default="baseline")
    sp.add_argument("--config", help="cost a config file instead")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--report", action="store_true",
                    help="compare presets against recorded figures")
    sp.add_argument("--resolve", type=int, metavar="PARAMS",
                    help="search schedules matching a parameter total")
    sp.set_defaults(func=cmd_analyze_cost)

    sp = sub.add_parser("plot", help="render rd curves to svg")
    sp.add_argument("--csv", action="append", required=True)
    sp.add_argument("--metric", choices=("d1", "d2"), default="d1")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        # missing or unreadable inputs are a data problem, not a bug
        print(f"error: data: {exc}", file=sys.stderr)
        return 2
    except InternalError as exc:
        print(f"error: internal: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        print("error: internal: interrupted", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - the cli boundary
        print(f"error: internal: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
