"""Session-log directory format: manifest.json plus PNG frames.

RGB is 8-bit PNG; depth is 16-bit single-channel PNG where
value * depth_scale_m_per_unit = meters and 0 marks invalid pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import FrameSample, PinholeCamera, Pose

MANIFEST_NAME = "manifest.json"
DEFAULT_DEPTH_SCALE = 0.001


def write_rgb_png(path, rgb01: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb01) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_depth_png(path, depth_m: np.ndarray, scale: float) -> None:
    units = np.clip(np.round(np.asarray(depth_m) / scale), 0, 65535).astype(np.uint16)
    Image.fromarray(units).save(path, format="PNG")


def read_depth_png(path, scale: float) -> np.ndarray:
    with Image.open(path) as im:
        units = np.asarray(im, dtype=np.float64)
    return units * scale


def _pose_to_json(p: Pose) -> dict:
    q, t = p.quat, p.trans
    return {
        "qw": q[0], "qx": q[1], "qy": q[2], "qz": q[3],
        "tx": t[0], "ty": t[1], "tz": t[2],
    }


def _pose_from_json(d: dict) -> Pose:
    return Pose(
        np.array([d["qw"], d["qx"], d["qy"], d["qz"]]),
        np.array([d["tx"], d["ty"], d["tz"]]),
    )


def _camera_to_json(cam_id: str, cam: PinholeCamera, has_depth: bool) -> dict:
    return {
        "id": cam_id,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "distortion": [float(v) for v in cam.distortion],
        "rectified": cam.rectified,
        "has_depth": has_depth,
    }


def _camera_from_json(d: dict) -> Tuple[str, PinholeCamera, bool]:
    cam = PinholeCamera(
        fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
        width=d["width"], height=d["height"],
        distortion=np.array(d["distortion"], dtype=np.float64),
        rectified=d["rectified"],
    )
    return d["id"], cam, d["has_depth"]


class SessionWriter:
    """Incremental session-log writer with deterministic output bytes."""

    def __init__(
        self,
        out_dir,
        cameras: Sequence[Tuple[str, PinholeCamera, bool]],
        depth_scale: float = DEFAULT_DEPTH_SCALE,
    ):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cameras = list(cameras)
        self.depth_scale = depth_scale
        self._frames: List[dict] = []

    def add_frame(self, frame: FrameSample) -> None:
        stem = f"{frame.camera_id}_{frame.seq:06d}"
        rgb_name = f"{stem}.png"
        write_rgb_png(self.dir / rgb_name, frame.rgb)
        depth_name = None
        if frame.depth is not None:
            depth_name = f"{stem}_depth.png"
            write_depth_png(self.dir / depth_name, frame.depth, self.depth_scale)
        self._frames.append(
            {
                "cam": frame.camera_id,
                "seq": frame.seq,
                "t": frame.timestamp,
                "pose": _pose_to_json(frame.pose),
                "rgb": rgb_name,
                "depth": depth_name,
            }
        )

    def finish(self) -> Path:
        manifest = {
            "cameras": [_camera_to_json(*c) for c in self.cameras],
            "frames": self._frames,
            "depth_scale_m_per_unit": self.depth_scale,
        }
        path = self.dir / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
            f.write("\n")
        return path


@dataclass
class Session:
    """Loaded session log; frames are read lazily."""

    dir: Path
    cameras: Dict[str, Tuple[PinholeCamera, bool]]
    frames: List[dict]
    depth_scale: float

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, i: int) -> FrameSample:
        rec = self.frames[i]
        cam, has_depth = self.cameras[rec["cam"]]
        rgb = read_rgb_png(self.dir / rec["rgb"])
        depth = None
        if rec["depth"] is not None and has_depth:
            depth = read_depth_png(self.dir / rec["depth"], self.depth_scale)
        return FrameSample(
            camera_id=rec["cam"],
            seq=rec["seq"],
            timestamp=rec["t"],
            rgb=rgb,
            depth=depth,
            pose=_pose_from_json(rec["pose"]),
            camera=cam,
        )

    def __iter__(self) -> Iterator[FrameSample]:
        for i in range(len(self.frames)):
            yield self.frame(i)


def load_session(session_dir) -> Session:
    session_dir = Path(session_dir)
    with open(session_dir / MANIFEST_NAME, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    cameras = {}
    for c in manifest["cameras"]:
        cam_id, cam, has_depth = _camera_from_json(c)
        cameras[cam_id] = (cam, has_depth)
    return Session(
        dir=session_dir,
        cameras=cameras,
        frames=manifest["frames"],
        depth_scale=manifest["depth_scale_m_per_unit"],
    )
