"""Operator entry points: gen, serve, render, eval, bench.

Configuration is a TOML file whose sections mirror the module configs;
unknown keys are rejected and every default comes straight from the
owning module's dataclass. Exit codes: 0 success, 1 usage, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import signal
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .core import Aabb, PinholeCamera, Pose
from .evaluation import EvalSettings, render_sweep, run_eval
from .ingest import FilterPolicy, ReplayScript
from .sessionlog import load_session, write_depth_png, write_rgb_png
from .service import IngestState, RenderServer, ServiceConfig
from .splat import SplatBackend, SplatSet, SplatTrainConfig, rasterize
from .synth import (
    benchmark_scene,
    benchmark_trajectory,
    generate_session,
    load_generation_spec,
)
from .tsdf import MeshBackend, TriangleMesh, TsdfConfig, rasterize_mesh
from .voxel import VoxelBackend, VoxelGrid, VoxelTrainConfig, render_image

DEFAULT_BUFFER_CAPACITY = 64
DEFAULT_SPLAT_MAX_COUNT = 12000
DEFAULT_VOXEL_RESOLUTION = (64, 64, 64)


class UsageError(Exception):
    pass


@dataclass
class Config:
    policy: FilterPolicy = field(default_factory=FilterPolicy)
    buffer_capacity: int = DEFAULT_BUFFER_CAPACITY
    voxel: VoxelTrainConfig = field(default_factory=VoxelTrainConfig)
    voxel_resolution: Tuple[int, int, int] = DEFAULT_VOXEL_RESOLUTION
    bounds: Optional[Aabb] = None
    splat: SplatTrainConfig = field(default_factory=SplatTrainConfig)
    splat_max_count: int = DEFAULT_SPLAT_MAX_COUNT
    mesh: TsdfConfig = field(default_factory=TsdfConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)
    eval_iterations: int = 2000
    eval_cadence: int = 25
    eval_target_psnr: float = 0.0
    seed: int = 0


def _build_section(cls, section: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise UsageError(f"unknown key(s) in [{what}]: {', '.join(unknown)}")
    coerced = {
        k: tuple(v) if isinstance(v, list) else v for k, v in section.items()
    }
    return cls(**coerced)


def load_config(path: Optional[str]) -> Config:
    cfg = Config()
    if path is None:
        return cfg
    with open(path, "rb") as f:
        data = tomllib.load(f)
    known_sections = {"ingest", "voxel", "splat", "mesh", "service", "eval"}
    unknown = sorted(set(data) - known_sections)
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(unknown)}")

    ingest = dict(data.get("ingest", {}))
    cfg.buffer_capacity = int(ingest.pop("buffer_capacity", cfg.buffer_capacity))
    cfg.policy = _build_section(FilterPolicy, ingest, "ingest")

    vox = dict(data.get("voxel", {}))
    if "resolution" in vox:
        cfg.voxel_resolution = tuple(int(v) for v in vox.pop("resolution"))
    if "bounds" in vox:
        b = [float(v) for v in vox.pop("bounds")]
        cfg.bounds = Aabb(np.array(b[:3]), np.array(b[3:]))
    cfg.voxel = _build_section(VoxelTrainConfig, vox, "voxel")

    spl = dict(data.get("splat", {}))
    cfg.splat_max_count = int(spl.pop("max_count", cfg.splat_max_count))
    cfg.splat = _build_section(SplatTrainConfig, spl, "splat")

    cfg.mesh = _build_section(TsdfConfig, dict(data.get("mesh", {})), "mesh")
    cfg.service = _build_section(ServiceConfig, dict(data.get("service", {})), "service")

    ev = dict(data.get("eval", {}))
    cfg.eval_iterations = int(ev.pop("iterations", cfg.eval_iterations))
    cfg.eval_cadence = int(ev.pop("cadence", cfg.eval_cadence))
    cfg.eval_target_psnr = float(ev.pop("target_psnr", cfg.eval_target_psnr))
    cfg.seed = int(ev.pop("seed", cfg.seed))
    if ev:
        raise UsageError(f"unknown key(s) in [eval]: {', '.join(sorted(ev))}")
    return cfg


def config_defaults_text() -> str:
    """Human-readable defaults, generated from the owning dataclasses."""
    lines = ["configuration defaults (TOML sections):"]
    lines.append(f"  [ingest] buffer_capacity = {DEFAULT_BUFFER_CAPACITY}")
    for f in dataclasses.fields(FilterPolicy):
        lines.append(f"  [ingest] {f.name} = {f.default}")
    lines.append(f"  [voxel] resolution = {list(DEFAULT_VOXEL_RESOLUTION)}")
    for f in dataclasses.fields(VoxelTrainConfig):
        d = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        lines.append(f"  [voxel] {f.name} = {d}")
    lines.append(f"  [splat] max_count = {DEFAULT_SPLAT_MAX_COUNT}")
    for f in dataclasses.fields(SplatTrainConfig):
        d = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        lines.append(f"  [splat] {f.name} = {d}")
    for f in dataclasses.fields(TsdfConfig):
        lines.append(f"  [mesh] {f.name} = {f.default}")
    for f in dataclasses.fields(ServiceConfig):
        lines.append(f"  [service] {f.name} = {f.default}")
    lines.append("  [eval] iterations = 2000, cadence = 25, target_psnr = 0.0, seed = 0")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument parsing helpers


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_pose(text: str) -> Pose:
    try:
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 7:
            raise ValueError
        return Pose(np.array(vals[:4]), np.array(vals[4:]))
    except ValueError:
        raise UsageError(f"--pose expects 'qw,qx,qy,qz,tx,ty,tz', got {text!r}")


def parse_camera(text: str) -> PinholeCamera:
    try:
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 6:
            raise ValueError
        return PinholeCamera(
            fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3], width=int(vals[4]), height=int(vals[5])
        )
    except ValueError:
        raise UsageError(f"--cam expects 'fx,fy,cx,cy,w,h', got {text!r}")


def parse_crop(text: Optional[str]) -> Optional[Aabb]:
    if text is None:
        return None
    try:
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 6:
            raise ValueError
        return Aabb(np.array(vals[:3]), np.array(vals[3:]))
    except ValueError:
        raise UsageError(f"--crop expects 'x0,y0,z0,x1,y1,z1', got {text!r}")


def _detect_checkpoint(path: Path) -> str:
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"VOXF":
        return "voxel"
    if magic == b"SPLT":
        return "splat"
    if magic[:3] == b"ply":
        return "mesh"
    raise UsageError(f"unrecognized checkpoint format in {path}")


def _load_renderer(path: Path, cfg: Config):
    kind = _detect_checkpoint(path)
    if kind == "voxel":
        grid = VoxelGrid.load(path)
        return kind, lambda cam, pose, crop: render_image(grid, cam, pose, cfg.voxel, crop)
    if kind == "splat":
        splats = SplatSet.load(path)
        return kind, lambda cam, pose, crop: rasterize(splats, cam, pose, cfg.splat, crop)
    mesh = TriangleMesh.load_ply(path)
    return kind, lambda cam, pose, crop: rasterize_mesh(mesh, cam, pose, cfg.mesh, crop)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    if args.preset == "benchmark":
        scene = benchmark_scene()
        traj = benchmark_trajectory(args.frames or 40)
    else:
        if args.scene is None:
            raise UsageError("gen requires --scene spec.json or --preset benchmark")
        scene, traj = load_generation_spec(args.scene)
    out = generate_session(scene, traj, args.out, with_depth=not args.no_depth)
    print(f"session written to {out.parent}")
    return 0


def _make_backends(name: str, cfg: Config, ingest_state: IngestState, seed: int) -> Dict[str, object]:
    if name == "voxel":
        bounds = cfg.bounds
        if bounds is None:
            from .evaluation import scene_bounds_from_buffer

            bounds = scene_bounds_from_buffer(ingest_state.buffer)
        grid = VoxelGrid(cfg.voxel_resolution, bounds)
        return {"voxel": VoxelBackend(grid, cfg.voxel)}
    if name == "splat":
        return {
            "splat": SplatBackend.from_buffer(
                ingest_state.buffer, cfg.splat, max_count=cfg.splat_max_count, seed=seed
            )
        }
    if name == "mesh":
        return {"mesh": MeshBackend(cfg.mesh)}
    raise UsageError(f"unknown backend {name!r}")


def cmd_serve(args) -> int:
    cfg = load_config(args.config)
    ingest_state = IngestState(cfg.buffer_capacity, cfg.policy)
    host, _, port_s = args.listen.rpartition(":")
    host = host or "127.0.0.1"
    port = int(port_s) if port_s else 0

    feeder = None
    if args.replay:
        session = load_session(args.replay)
        for cam_id, (cam, has_depth) in sorted(session.cameras.items()):
            ingest_state.registry.register(cam_id, cam, has_depth)
        ingest_state.ensure_buffer()
        if args.script:
            ingest_state.script = ReplayScript.from_file(args.script)

        def feed():
            prev_t = None
            for frame in session:
                if args.speed > 0 and prev_t is not None:
                    time.sleep(max(0.0, (frame.timestamp - prev_t) / args.speed))
                prev_t = frame.timestamp
                try:
                    ingest_state.handle_frame(frame, frame.depth is not None)
                except ValueError:
                    pass

        feeder = threading.Thread(target=feed, daemon=True)
        feeder.start()

    # wait for the initial batch before constructing the backend
    deadline = time.time() + args.startup_timeout
    while True:
        buf = ingest_state.buffer
        if buf is not None and buf.count >= cfg.policy.initial_batch_size:
            break
        if time.time() > deadline:
            print("error: no initial batch before startup timeout", file=sys.stderr)
            return 2
        time.sleep(0.05)

    backends = _make_backends(args.backend, cfg, ingest_state, cfg.seed)
    server = RenderServer(
        backends, ingest_state, cfg.service, host=host, port=port, train_seed=cfg.seed
    )
    print(f"serving backend={args.backend} on {server.address[0]}:{server.address[1]}")

    bridge = None
    if args.console_port:
        from .webconsole import ConsoleBridge

        bridge = ConsoleBridge(server, host, args.console_port)
        bridge.start()
        print(f"console at http://{host}:{args.console_port}/")

    def on_signal(signum, frame):
        server.stop_event.set()

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    if args.max_steps:
        threading.Thread(
            target=_stop_after_steps, args=(server, args.max_steps), daemon=True
        ).start()
    try:
        server.serve_forever()
    finally:
        server.shutdown()
        if bridge is not None:
            bridge.stop()
        if args.ckpt_out:
            backend = next(iter(backends.values()))
            backend.save(args.ckpt_out)
            print(f"checkpoint flushed to {args.ckpt_out}")
    return 0


def _stop_after_steps(server: RenderServer, max_steps: int) -> None:
    while not server.stop_event.is_set():
        if server.scheduler.counters.train_steps >= max_steps:
            server.stop_event.set()
            return
        time.sleep(0.05)


def cmd_render(args) -> int:
    cfg = load_config(args.config)
    pose = parse_pose(args.pose)
    camera = parse_camera(args.cam)
    crop = parse_crop(args.crop)
    _, render = _load_renderer(Path(args.ckpt), cfg)
    product = render(camera, pose, crop)
    write_rgb_png(args.out, product.rgb)
    if args.depth_out:
        write_depth_png(args.depth_out, product.depth, 0.001)
    print(f"rendered {camera.width}x{camera.height} in {product.render_time * 1000:.1f} ms")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    for m in methods:
        if m not in ("voxel", "splat", "mesh"):
            raise UsageError(f"unknown method {m!r} in --methods")
    settings = EvalSettings(
        methods=methods,
        iterations=args.iters or cfg.eval_iterations,
        eval_cadence=cfg.eval_cadence,
        target_psnr=cfg.eval_target_psnr,
        seed=cfg.seed,
        voxel_resolution=cfg.voxel_resolution,
        bounds=cfg.bounds,
        splat_max_count=cfg.splat_max_count,
        voxel=cfg.voxel,
        splat=cfg.splat,
        mesh=cfg.mesh,
    )
    report = run_eval(
        args.session,
        ReplayScript.from_file(args.script),
        ReplayScript.from_file(args.holdout),
        settings,
        out_dir=Path(args.ckpt_dir) if args.ckpt_dir else None,
    )
    report.to_csv(args.out)
    if args.json:
        report.to_json(args.json)
    print(f"report written to {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    try:
        fractions = [float(v) for v in args.sweep.split(",")]
        if not fractions or not all(0 < f <= 1 for f in fractions):
            raise ValueError
    except ValueError:
        raise UsageError(f"--sweep expects comma-separated fractions in (0,1], got {args.sweep!r}")
    camera = parse_camera(args.cam)
    pose = parse_pose(args.pose)
    kind, render = _load_renderer(Path(args.ckpt), cfg)
    rows = render_sweep(
        lambda cam, p: render(cam, p, None), camera, pose, fractions, repeats=args.repeats
    )
    lines = ["fraction,mean_ms,std_ms"]
    for frac, mean, std in rows:
        lines.append(f"{frac},{mean:.3f},{std:.3f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(
        prog="fieldstream",
        description="Online radiance-field reconstruction and render streaming.",
        epilog=config_defaults_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic session log")
    g.add_argument("--scene", help="scene/trajectory spec JSON")
    g.add_argument("--preset", choices=["benchmark"], help="built-in scene preset")
    g.add_argument("--frames", type=int, default=None, help="override frame count (presets)")
    g.add_argument("--out", required=True, help="output session directory")
    g.add_argument("--no-depth", action="store_true", help="omit depth images")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("serve", help="run ingest + training + render service")
    s.add_argument("--config", help="TOML config file")
    s.add_argument("--listen", default="127.0.0.1:7043", help="host:port to listen on")
    s.add_argument("--backend", required=True, choices=["voxel", "splat", "mesh"])
    s.add_argument("--replay", help="feed a session log instead of live pushes")
    s.add_argument("--script", help="replay script (cam_id,seq per line)")
    s.add_argument("--speed", type=float, default=1.0, help="replay speed; 0 = as fast as possible")
    s.add_argument("--console-port", type=int, default=0, help="serve the browser console here")
    s.add_argument("--ckpt-out", help="flush a checkpoint here on shutdown")
    s.add_argument("--max-steps", type=int, default=0, help="stop after N training steps")
    s.add_argument("--startup-timeout", type=float, default=60.0)
    s.set_defaults(func=cmd_serve)

    r = sub.add_parser("render", help="offline render from a checkpoint")
    r.add_argument("--config", help="TOML config file")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--pose", required=True, help="qw,qx,qy,qz,tx,ty,tz")
    r.add_argument("--cam", required=True, help="fx,fy,cx,cy,w,h")
    r.add_argument("--crop", help="x0,y0,z0,x1,y1,z1")
    r.add_argument("--out", required=True, help="output PNG")
    r.add_argument("--depth-out", help="output 16-bit depth PNG (mm)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="train and evaluate methods on a session")
    e.add_argument("--config", help="TOML config file")
    e.add_argument("--session", required=True)
    e.add_argument("--script", required=True, help="training replay script")
    e.add_argument("--holdout", required=True, help="held-out view script")
    e.add_argument("--methods", default="voxel,splat,mesh")
    e.add_argument("--iters", type=int, default=0, help="override training iterations")
    e.add_argument("--out", required=True, help="report CSV path")
    e.add_argument("--json", help="also write a JSON mirror")
    e.add_argument("--ckpt-dir", help="directory for final checkpoints")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="render-time sweep from a checkpoint")
    b.add_argument("--config", help="TOML config file")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--sweep", default="0.1,0.25,0.5,0.75,1.0")
    b.add_argument("--cam", required=True, help="fx,fy,cx,cy,w,h")
    b.add_argument("--pose", required=True, help="qw,qx,qy,qz,tx,ty,tz")
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--out", help="CSV output (stdout when omitted)")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
