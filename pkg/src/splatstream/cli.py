"""The `splatstream` command: restream, train, live, render, serve, eval.

Exit codes: 0 success, 1 runtime failure, 2 input/config error. Failures
print a single machine-parsable line `error: <kind>: <message>` on stderr.
Flag values win over environment variables, which win over config files.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import signal
import sys
import threading
import time

import numpy as np

from . import delivery, imgio, ingest, modelstore, posegeom, trainer
from .errors import InputError, SplatStreamError
from .evalkit import MetricSeries, psnr, ssim
from .rasterizer import rasterize
from .trainer import TrainConfig, TrainView


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: input: {e}", file=sys.stderr)
        return 2
    except SplatStreamError as e:
        print(f"error: runtime: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="splatstream",
        description="Streaming gaussian-splat reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("restream", help="replay a recorded capture over TCP")
    p.add_argument("--capture-dir", required=True)
    p.add_argument("--target", required=True, help="host:port")
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--jitter-ms", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_restream)

    p = sub.add_parser("train", help="offline optimization from a COLMAP dataset")
    p.add_argument("--colmap-dir", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--out", required=True, help="output model path (.splm)")
    p.add_argument("--config", help="training config file")
    p.add_argument("--report", help="metric report path")
    p.add_argument("--holdout-every", type=int, default=0,
                   help="reserve every Nth view for evaluation")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("live", help="ingest a live stream and update the model")
    p.add_argument("--listen", help="ingest bind address (env SPST_BIND)")
    p.add_argument("--colmap-dir", help="seed poses/points")
    p.add_argument("--model", help="initial model (.splm)")
    p.add_argument("--out", required=True)
    p.add_argument("--serve", help="delivery bind address host:port")
    p.add_argument("--config", help="training config file")
    p.add_argument("--report", help="latency report path")
    p.add_argument("--budget-iters", type=int, default=10,
                   help="optimization steps per arriving batch")
    p.add_argument("--batch-frames", type=int, default=4)
    p.add_argument("--idle-warn-s", type=float, default=30.0)
    p.add_argument("--max-updates", type=int, default=0,
                   help="stop after N published updates (0: run until signal)")
    p.add_argument("--passthrough", action="store_true",
                   help="skip optimization; republish the model per frame")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_live)

    p = sub.add_parser("render", help="render a model from COLMAP poses")
    p.add_argument("--model", required=True)
    p.add_argument("--colmap-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--background", default="0,0,0")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("serve", help="serve a model to WebSocket subscribers")
    p.add_argument("--model", required=True)
    p.add_argument("--address", default="127.0.0.1:7506")
    p.add_argument("--conformance", action="store_true",
                   help="run the conformance scenarios against the server "
                        "and exit")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("eval", help="image or trajectory quality metrics")
    p.add_argument("--mode", choices=("images", "trajectory", "summary"),
                   default="images")
    p.add_argument("--model")
    p.add_argument("--colmap-dir")
    p.add_argument("--images-dir")
    p.add_argument("--est-colmap")
    p.add_argument("--ref-colmap")
    p.add_argument("--rpe-delta", type=int, default=1)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)
    return parser


_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]


def _add_train_config_flags(parser):
    """Every training config key is a flag of the same name (flag wins over
    the SPST_<KEY> environment variable, which wins over the config file)."""
    group = parser.add_argument_group("training config overrides")
    for name in _TRAIN_KEYS:
        group.add_argument(f"--{name.replace('_', '-')}",
                           dest=f"cfg_{name}", metavar="V")


def _load_train_config(args) -> TrainConfig:
    overrides = {}
    for name in _TRAIN_KEYS:
        env = os.environ.get(f"SPST_{name.upper()}")
        if env is not None:
            overrides[name] = env
        flag = getattr(args, f"cfg_{name}", None)
        if flag is not None:
            overrides[name] = flag
    if args.config:
        return TrainConfig.from_file(args.config, overrides)
    return TrainConfig.from_dict(overrides)


def _load_views(colmap_dir, images_dir):
    sequence, points = posegeom.import_colmap(colmap_dir)
    views = []
    for i, (ts, pose) in enumerate(sequence.poses):
        name = sequence.names[i]
        intr = sequence.intrinsics[sequence.camera_ids[i]]
        path = os.path.join(images_dir, name)
        image = imgio.load_png(path)
        if image.shape[:2] != (intr.height, intr.width):
            raise InputError(
                f"{name}: image is {image.shape[1]}x{image.shape[0]}, "
                f"camera expects {intr.width}x{intr.height}")
        views.append(TrainView(image=image, pose=pose, intrinsics=intr,
                               view_id=name))
    return views, points


def cmd_restream(args) -> int:
    report = ingest.restream(args.capture_dir, args.target,
                             rate_multiplier=args.rate,
                             jitter_ms=args.jitter_ms, seed=args.seed)
    print(f"sent={report.sent} duration_s={report.duration_s:.3f} "
          f"lag_p50_ms={report.lag_percentile(50):.2f} "
          f"lag_p95_ms={report.lag_percentile(95):.2f} "
          f"resolution={report.resolution_factor}")
    return 0


def cmd_train(args) -> int:
    config = _load_train_config(args)
    views, points = _load_views(args.colmap_dir, args.images_dir)
    if not len(points):
        raise InputError("COLMAP reconstruction has no sparse points")
    train_views = views
    holdout = []
    if args.holdout_every > 1:
        holdout = views[::args.holdout_every]
        train_views = [v for i, v in enumerate(views)
                       if i % args.holdout_every != 0]

    seeds = [{"xyz": points.xyz[i], "rgb": points.rgb[i] / 255.0}
             for i in range(len(points))]
    cloud = trainer.init_from_points(seeds, config)
    state = trainer.init_state(cloud, config)

    series = MetricSeries()

    def progress(state, loss):
        if state.iteration % 1000 == 0:
            line = (f"iter={state.iteration} loss={loss:.6f} "
                    f"ma={state.moving_average():.6f} n={len(state.cloud)}")
            print(line, flush=True)
            if holdout:
                vals = [psnr(rasterize(state.cloud, v.pose, v.intrinsics,
                                       config.background).pixels, v.image)
                        for v in holdout]
                series.add(f"iter{state.iteration}", float(np.mean(vals)), 1.0)

    trainer.train_loop(state, train_views, config.iterations, progress)
    nbytes = modelstore.save(state.cloud, args.out)
    print(f"model={args.out} bytes={nbytes} gaussians={len(state.cloud)}")
    if args.report:
        _write_image_metrics(state.cloud, holdout or views, config.background,
                             args.report)
    return 0


def _write_image_metrics(cloud, views, background, path):
    series = MetricSeries()
    for view in views:
        out = rasterize(cloud, view.pose, view.intrinsics, background)
        series.add(view.view_id, psnr(out.pixels, view.image),
                   ssim(out.pixels, view.image))
    with open(path, "w") as f:
        f.write("\n".join(series.to_lines()) + "\n")
    print(f"report={path} mean_psnr={series.mean_psnr():.3f} "
          f"mean_ssim={series.mean_ssim():.4f}")


def cmd_render(args) -> int:
    cloud = modelstore.load(args.model)
    background = tuple(float(v) for v in args.background.split(","))
    sequence, _ = posegeom.import_colmap(args.colmap_dir)
    os.makedirs(args.out_dir, exist_ok=True)
    for i, (ts, pose) in enumerate(sequence.poses):
        intr = sequence.intrinsics[sequence.camera_ids[i]]
        out = rasterize(cloud, pose, intr, background)
        name = sequence.names[i] if sequence.names else f"frame_{i:06d}.png"
        imgio.save_png(os.path.join(args.out_dir, name), out.pixels)
    print(f"rendered={len(sequence)} out_dir={args.out_dir}")
    return 0


def cmd_serve(args) -> int:
    cloud = modelstore.load(args.model)
    host, _, port = args.address.rpartition(":")
    server = delivery.DeliveryServer(bind=(host or "127.0.0.1", int(port)))
    try:
        server.publish(cloud.snapshot())
        print(f"serving {len(cloud)} gaussians on "
              f"{server.address[0]}:{server.address[1]}", flush=True)
        if args.conformance:
            results = delivery.run_all_conformance(server.address)
            ok = True
            for result in results:
                status = "pass" if result["pass"] else "FAIL"
                lat = (f" p50_ms={np.median(result['latency_ms']):.2f}"
                       if result["latency_ms"] else "")
                print(f"conformance {result['scenario']}: {status} "
                      f"{result['detail']}{lat}")
                ok &= result["pass"]
            return 0 if ok else 1
        stop = threading.Event()
        signal.signal(signal.SIGINT, lambda *_: stop.set())
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
        while not stop.is_set():
            time.sleep(0.2)
        return 0
    finally:
        server.close()


def cmd_eval(args) -> int:
    if args.mode == "summary":
        if not args.report:
            raise InputError("--report is required for summary mode")
        with open(args.report) as f:
            series = MetricSeries.from_lines(f)
        print(f"views={len(series.records)} mean_psnr={series.mean_psnr():.3f} "
              f"mean_ssim={series.mean_ssim():.4f}")
        return 0
    if args.mode == "trajectory":
        if not (args.est_colmap and args.ref_colmap):
            raise InputError("trajectory mode needs --est-colmap and --ref-colmap")
        est, _ = posegeom.import_colmap(args.est_colmap)
        ref, _ = posegeom.import_colmap(args.ref_colmap)
        out_ate = posegeom.ate(est, ref)
        out_rpe = posegeom.rpe(est, ref, delta=args.rpe_delta)
        print(f"ate_rmse={out_ate['rmse']:.6f} ate_mean={out_ate['mean']:.6f} "
              f"ate_median={out_ate['median']:.6f}")
        print(f"rpe_trans_rmse={out_rpe['trans_rmse']:.6f} "
              f"rpe_rot_rmse_deg={out_rpe['rot_rmse_deg']:.6f}")
        return 0
    if not (args.model and args.colmap_dir and args.images_dir):
        raise InputError("images mode needs --model, --colmap-dir, --images-dir")
    cloud = modelstore.load(args.model)
    views, _ = _load_views(args.colmap_dir, args.images_dir)
    report = args.report or "metrics.txt"
    _write_image_metrics(cloud, views, (0.0, 0.0, 0.0), report)
    return 0


def cmd_live(args) -> int:
    config = _load_train_config(args)
    if args.model:
        cloud = modelstore.load(args.model)
    elif args.colmap_dir:
        _, points = posegeom.import_colmap(args.colmap_dir)
        seeds = [{"xyz": points.xyz[i], "rgb": points.rgb[i] / 255.0}
                 for i in range(len(points))]
        cloud = trainer.init_from_points(seeds, config)
    else:
        raise InputError("live mode needs --model or --colmap-dir")
    state = trainer.init_state(cloud, config)
    if args.colmap_dir:
        sequence, _ = posegeom.import_colmap(args.colmap_dir)
        intrinsics = sequence.intrinsics
    else:
        intrinsics = {}
    default_intr = next(iter(intrinsics.values())) if intrinsics else None

    server = ingest.IngestServer(bind=args.listen)
    publisher = None
    if args.serve:
        host, _, port = args.serve.rpartition(":")
        publisher = delivery.DeliveryServer(bind=(host or "127.0.0.1",
                                                  int(port)))
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())

    latencies = []
    published = 0
    print(f"ingest on {server.address[0]}:{server.address[1]}"
          + (f", serving on {publisher.address[0]}:{publisher.address[1]}"
             if publisher else ""), flush=True)
    try:
        last_frame = time.monotonic()
        warned = False
        batch = []
        while not stop.is_set():
            record = server.next_record(timeout=0.5)
            now = time.monotonic()
            if record is None:
                if now - last_frame > args.idle_warn_s and not warned:
                    print(f"warning: no frames for {args.idle_warn_s:.0f} s",
                          flush=True)
                    warned = True
                continue
            last_frame = now
            warned = False

            if args.passthrough:
                state.cloud.touch()
                if publisher is not None:
                    publisher.publish(state.cloud.snapshot())
                    published += 1
                    arrival = server.arrival_ns.get(record.frame.seq)
                    if arrival is not None:
                        latencies.append((time.monotonic_ns() - arrival) / 1e6)
                if args.max_updates and published >= args.max_updates:
                    break
                continue

            if default_intr is None:
                raise InputError("live optimization needs --colmap-dir "
                                 "intrinsics for incoming frames")
            image = record.frame.image()
            if image.shape[:2] != (default_intr.height, default_intr.width):
                continue  # resolution changed mid-stream; skip
            pose_guess = _nearest_pose(sequence, record.frame_ts)
            batch.append(TrainView(image=image, pose=pose_guess,
                                   intrinsics=default_intr,
                                   view_id=f"live{record.frame.seq}"))
            if len(batch) < args.batch_frames:
                continue
            try:
                trainer.online_update(state, batch, args.budget_iters)
            except SplatStreamError as e:
                print(f"error: runtime: {e}", file=sys.stderr)
                stop.set()
                break
            batch = []
            if publisher is not None:
                publisher.publish(state.cloud.snapshot())
                published += 1
                arrival = server.arrival_ns.get(record.frame.seq)
                if arrival is not None:
                    latencies.append((time.monotonic_ns() - arrival) / 1e6)
            if args.max_updates and published >= args.max_updates:
                break
    finally:
        server.close()
        if publisher is not None:
            publisher.close()
        modelstore.save(state.cloud, args.out)
        print(f"model={args.out} gaussians={len(state.cloud)} "
              f"updates={published}", flush=True)
        if args.report and latencies:
            with open(args.report, "w") as f:
                for ms in latencies:
                    f.write(f"latency_ms={ms:.3f}\n")
                f.write(f"p50_ms={np.percentile(latencies, 50):.3f}\n")
                f.write(f"p95_ms={np.percentile(latencies, 95):.3f}\n")
    return 0


def _nearest_pose(sequence, ts):
    stamps = sequence.timestamps()
    idx = int(np.argmin(np.abs(stamps - ts)))
    return sequence.poses[idx][1]


def model_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        digest.update(f.read())
    return digest.hexdigest()


if __name__ == "__main__":
    sys.exit(main())
