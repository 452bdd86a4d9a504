"""Command-line entry point: ``hubreg <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .evaluation import evaluate_landmarks, load_landmarks, save_landmarks
from .keypoints import DetectorParams, extract, load_keypoints, save_keypoints
from .matching import MatchCriteria, build_graph, load_matches, save_matches
from .optimizer import OptimizerConfig, register
from .render import render_average
from .robust import match_distances
from .synthetic import SyntheticSpec, generate_synthetic
from .transforms import invert_points, load_transform, save_transform
from .volume_io import load_volume, write_volume

logger = logging.getLogger("hubreg")


class CliError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# shared flag groups


def _detector_flags(p):
    d = DetectorParams()
    g = p.add_argument_group("detector")
    g.add_argument("--octaves", type=int, default=d.octaves)
    g.add_argument("--scales-per-octave", type=int, default=d.scales_per_octave)
    g.add_argument("--response-threshold", type=float, default=d.response_threshold)
    g.add_argument("--max-keypoints", type=int, default=d.max_keypoints)


def _detector(args) -> DetectorParams:
    return DetectorParams(args.octaves, args.scales_per_octave, args.response_threshold,
                          args.max_keypoints)


def _matching_flags(p):
    c = MatchCriteria()
    g = p.add_argument_group("matching")
    g.add_argument("--max-descriptor-distance", type=float, default=c.max_descriptor_distance)
    g.add_argument("--nn-ratio", type=float, default=c.nn_ratio)
    g.add_argument("--max-scale-ratio", type=float, default=math.exp(c.max_scale_log_ratio),
                   help="largest allowed ratio between matched keypoint scales")
    g.add_argument("--ignore-sign", action="store_true",
                   help="allow matches between bright and dark blobs")


def _criteria(args) -> MatchCriteria:
    return MatchCriteria(args.max_descriptor_distance, args.nn_ratio,
                         math.log(args.max_scale_ratio), not args.ignore_sign)


def _optimizer_flags(p):
    c = OptimizerConfig()
    g = p.add_argument_group("optimizer")
    g.add_argument("--levels", type=float, nargs="+", default=list(c.levels),
                   help="grid spacings in mm, coarse to fine")
    g.add_argument("--iterations-per-level", type=int, default=c.iterations_per_level)
    g.add_argument("--alpha", type=float, default=c.alpha)
    g.add_argument("--init-iterations", type=int, default=c.init_iterations)
    g.add_argument("--gamma", type=float, default=c.gamma)
    g.add_argument("--theta-refresh-period", type=int, default=c.theta_refresh_period)


def _config(args) -> OptimizerConfig:
    return OptimizerConfig(tuple(args.levels), args.iterations_per_level, args.alpha,
                           args.init_iterations, args.gamma, args.theta_refresh_period,
                           threads=args.threads)


# --------------------------------------------------------------------------
# output helpers


def _write_rows(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def _write_registration(out: Path, result, graph, figures=True) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, tau in enumerate(result.transforms):
        p = out / f"transform_{i:03d}.json"
        save_transform(p, tau)
        paths.append(p)
    _write_rows(out / "trace.csv", result.trace,
                ["iter", "level", "energy", "sqrt_energy", "mean_weighted_distance"])
    _write_rows(out / "thetas.csv", result.theta_history, ["iter", "image", "s1", "s2", "r"])
    if figures and result.trace:
        plotting.plot_convergence(result.trace, out / "convergence.png")
        d = match_distances(graph, result.common)
        sel = (graph.a_img == 0) | (graph.b_img == 0)
        if np.count_nonzero(sel) > 1 and not result.thetas[0].absent:
            plotting.plot_distance_mixture(d[sel], result.thetas[0], out / "mixture_000.png")
    return paths


def _report(landmarks, transforms, out_csv: Path, figure=True) -> float:
    report = evaluate_landmarks(landmarks, transforms)
    print(report.table())
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_csv)
    if figure and report.categories:
        plotting.plot_landmarks(report, out_csv.with_suffix(".png"))
    return report.global_mean


# --------------------------------------------------------------------------
# subcommands


def cmd_extract(args) -> None:
    v = load_volume(args.volume)
    kps = extract(v, _detector(args), image_id=args.image_id)
    save_keypoints(args.output, kps)
    print(f"{len(kps)} keypoints -> {args.output}")


def cmd_match(args) -> None:
    if len(args.keypoints) < 2:
        raise CliError("need at least 2 images")
    sets = [load_keypoints(p, image_id=i) for i, p in enumerate(args.keypoints)]
    graph = build_graph(sets, _criteria(args), threads=args.threads)
    save_matches(args.output, graph)
    print(f"{graph.n_matches} matches -> {args.output}")


def cmd_register(args) -> None:
    if len(args.keypoints) < 2:
        raise CliError("need at least 2 images")
    sets = [load_keypoints(p, image_id=i) for i, p in enumerate(args.keypoints)]
    graph = load_matches(args.matches)
    if graph.n_images != len(sets) or list(graph.counts) != [len(s) for s in sets]:
        raise CliError("match file does not fit the keypoint files")
    result = register([s.positions for s in sets], graph, _config(args))
    paths = _write_registration(Path(args.output), result, graph, figures=not args.no_figures)
    print(f"{len(paths)} transforms -> {args.output}")


def cmd_apply(args) -> None:
    tau = load_transform(args.transform)
    if args.points:
        with open(args.points, newline="") as fh:
            rows = list(csv.DictReader(fh))
        pts = np.array([[float(r[k]) for k in ("x", "y", "z")] for r in rows]).reshape(-1, 3)
        if args.inverse:
            out, ok = invert_points(tau, pts)
            if not np.all(ok):
                logger.warning("%d points did not converge", int(np.sum(~ok)))
        else:
            out = tau.apply(pts)
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z"])
            w.writerows([[repr(float(c)) for c in p] for p in out])
    elif args.volume:
        rendered, _ = render_average([load_volume(args.volume)], [tau], args.spacing,
                                     threads=args.threads)
        write_volume(args.output, rendered)
    else:
        raise CliError("give --points or --volume")
    print(f"-> {args.output}")


def cmd_evaluate(args) -> None:
    landmarks = load_landmarks(args.landmarks)
    transforms = [load_transform(p) for p in args.transforms]
    missing = [lm.image_id for lm in landmarks if lm.image_id >= len(transforms)]
    if missing:
        raise CliError(f"no transform for landmark image ids {missing}")
    _report(landmarks, transforms, Path(args.output), figure=not args.no_figures)


def _spec(args) -> SyntheticSpec:
    return SyntheticSpec(seed=args.seed, n_images=args.images, n_points=args.points,
                         noise_sigma=args.noise, outlier_rate=args.outlier_rate,
                         warp_spacing=args.warp_spacing, max_displacement=args.max_displacement,
                         n_landmarks=args.landmarks, pair_fraction=args.pair_fraction)


def cmd_synth(args) -> None:
    group = generate_synthetic(_spec(args))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for i, kps in enumerate(group.keypoints):
        save_keypoints(out / f"keypoints_{i:03d}.kp", kps)
        save_transform(out / f"truth_{i:03d}.json", group.truth[i])
    save_matches(out / "matches.txt", group.graph)
    save_landmarks(out / "landmarks.csv", group.landmarks)
    np.savetxt(out / "outliers.txt", group.is_outlier.astype(int), fmt="%d")
    print(f"{group.spec.n_images} images, {group.graph.n_matches} matches -> {out}")


def cmd_pipeline(args) -> None:
    if len(args.volumes) < 2:
        raise CliError("need at least 2 images")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    sets = []
    for i, path in enumerate(args.volumes):
        kps = extract(load_volume(path), _detector(args), image_id=i)
        save_keypoints(out / f"keypoints_{i:03d}.kp", kps)
        sets.append(kps)
        logger.info("%s: %d keypoints", path, len(kps))
    graph = build_graph(sets, _criteria(args), threads=args.threads)
    save_matches(out / "matches.txt", graph)
    if graph.n_matches == 0:
        raise CliError("no matches between the images")
    result = register([s.positions for s in sets], graph, _config(args))
    _write_registration(out, result, graph, figures=not args.no_figures)
    if args.landmarks:
        _report(load_landmarks(args.landmarks), result.transforms, out / "report.csv",
                figure=not args.no_figures)
    if args.render:
        vols = [load_volume(p) for p in args.volumes]
        avg, _ = render_average(vols, result.transforms, args.spacing, threads=args.threads)
        write_volume(out / "average.nii", avg)
    print(f"done -> {out}")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hubreg", description="Groupwise keypoint-based "
                                     "registration of 3D volumes without a reference image.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="detect and describe keypoints")
    p.add_argument("volume")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--image-id", type=int, default=0)
    _detector_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("match", parents=[common], help="match keypoint files pairwise")
    p.add_argument("keypoints", nargs="+")
    p.add_argument("-o", "--output", required=True)
    _matching_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("register", parents=[common], help="estimate all half-transforms")
    p.add_argument("keypoints", nargs="+")
    p.add_argument("-m", "--matches", required=True)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true")
    _optimizer_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("apply", parents=[common], help="map points or resample a volume")
    p.add_argument("transform")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--points", help="CSV with x,y,z columns (mm)")
    src.add_argument("--volume")
    p.add_argument("--inverse", action="store_true", help="map common space back to the image")
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("evaluate", parents=[common], help="landmark spread report")
    p.add_argument("transforms", nargs="+")
    p.add_argument("-l", "--landmarks", required=True)
    p.add_argument("-o", "--output", required=True, help="report CSV")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    s = SyntheticSpec()
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--images", type=int, default=s.n_images)
    p.add_argument("--points", type=int, default=s.n_points)
    p.add_argument("--noise", type=float, default=s.noise_sigma)
    p.add_argument("--outlier-rate", type=float, default=s.outlier_rate)
    p.add_argument("--warp-spacing", type=float, default=s.warp_spacing)
    p.add_argument("--max-displacement", type=float, default=s.max_displacement)
    p.add_argument("--landmarks", type=int, default=s.n_landmarks)
    p.add_argument("--pair-fraction", type=float, default=s.pair_fraction)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", parents=[common], help="extract, match, register, report")
    p.add_argument("volumes", nargs="+")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("-l", "--landmarks")
    p.add_argument("--render", action="store_true", help="also write the average volume")
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--no-figures", action="store_true")
    _detector_flags(p)
    _matching_flags(p)
    _optimizer_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed)
    try:
        args.func(args)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(f"hubreg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
