"""Binary render-stream protocol.

Framing: every message is magic ``RFTP`` | version u8 = 1 | type u8 |
length u32 | payload, all integers little-endian. The same payloads ride
a browser message channel (WebSocket) as version u8 | type u8 | payload,
since that channel provides its own boundaries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from .core import Aabb, PinholeCamera, Pose

MAGIC = b"RFTP"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
MAX_PAYLOAD = 1 << 26  # 64 MiB

TYPE_HELLO = 0x01
TYPE_RENDER_REQUEST = 0x02
TYPE_RENDER_STAGE = 0x03
TYPE_CANCEL = 0x04
TYPE_STATS = 0x05
TYPE_FRAME_PUSH = 0x06
TYPE_ERROR = 0x07

ROLE_VIEWER = 0
ROLE_SENSOR = 1

BACKEND_CODES = {"voxel": 0, "splat": 1, "mesh": 2}
BACKEND_NAMES = {v: k for k, v in BACKEND_CODES.items()}

STAGE_S10 = 0
STAGE_S50 = 1
STAGE_S100 = 2
STAGE_FRACTIONS = {STAGE_S10: 0.1, STAGE_S50: 0.5, STAGE_S100: 1.0}

FLAG_WANT_DEPTH = 1
FLAG_PROGRESSIVE = 2
FLAG_CONTINUOUS = 4

STATS_FIELDS = (
    "frames_received",
    "frames_admitted",
    "requests_received",
    "requests_superseded",
    "stages_sent",
    "stages_dropped",
    "train_steps",
    "buffer_count",
)


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Hello:
    client_id: bytes  # 16 bytes
    role: int = ROLE_VIEWER


@dataclass(frozen=True)
class RenderRequest:
    request_id: int
    backend: str  # "voxel" | "splat" | "mesh"
    pose: Pose
    camera: PinholeCamera
    crop: Optional[Aabb] = None
    want_depth: bool = False
    progressive: bool = True
    continuous: bool = False


@dataclass(frozen=True)
class RenderStage:
    request_id: int
    stage: int  # STAGE_S10 / STAGE_S50 / STAGE_S100
    width: int
    height: int
    render_time_us: int
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: Optional[np.ndarray]  # (H, W) float32 meters


@dataclass(frozen=True)
class Cancel:
    request_id: int


@dataclass(frozen=True)
class Stats:
    counters: Tuple[int, ...]  # eight u64, see STATS_FIELDS

    def as_dict(self) -> dict:
        return dict(zip(STATS_FIELDS, self.counters))


@dataclass(frozen=True)
class FramePush:
    camera_id: str
    seq: int
    timestamp: float
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: Tuple[float, float, float, float]
    rectified: bool
    pose: Pose
    depth_scale: float
    rgb_png: bytes
    depth_png: Optional[bytes]


@dataclass(frozen=True)
class ErrorMsg:
    request_id: int
    code: int
    message: str


Message = Union[Hello, RenderRequest, RenderStage, Cancel, Stats, FramePush, ErrorMsg]

_POSE = struct.Struct("<7d")


def _pack_pose(p: Pose) -> bytes:
    return _POSE.pack(*p.quat, *p.trans)


def _unpack_pose(buf: bytes, off: int) -> Tuple[Pose, int]:
    vals = _POSE.unpack_from(buf, off)
    return Pose(np.array(vals[:4]), np.array(vals[4:])), off + _POSE.size


def encode_payload(msg: Message) -> Tuple[int, bytes]:
    """(type byte, payload bytes) for any message."""
    if isinstance(msg, Hello):
        if len(msg.client_id) != 16:
            raise ProtocolError("client_id must be exactly 16 bytes")
        return TYPE_HELLO, msg.client_id + struct.pack("<B", msg.role)

    if isinstance(msg, RenderRequest):
        if msg.backend not in BACKEND_CODES:
            raise ProtocolError(f"unknown backend {msg.backend!r}")
        flags = (
            (FLAG_WANT_DEPTH if msg.want_depth else 0)
            | (FLAG_PROGRESSIVE if msg.progressive else 0)
            | (FLAG_CONTINUOUS if msg.continuous else 0)
        )
        cam = msg.camera
        crop = msg.crop
        crop_vals = (
            tuple(np.asarray(crop.lo, dtype=np.float32))
            + tuple(np.asarray(crop.hi, dtype=np.float32))
            if crop is not None
            else (0.0,) * 6
        )
        payload = struct.pack("<QBB", msg.request_id, BACKEND_CODES[msg.backend], flags)
        payload += _pack_pose(msg.pose)
        payload += struct.pack("<4f", cam.fx, cam.fy, cam.cx, cam.cy)
        payload += struct.pack("<HH", cam.width, cam.height)
        payload += struct.pack("<B6f", 1 if crop is not None else 0, *crop_vals)
        return TYPE_RENDER_REQUEST, payload

    if isinstance(msg, RenderStage):
        rgb = np.ascontiguousarray(msg.rgb, dtype=np.uint8)
        if rgb.shape != (msg.height, msg.width, 3):
            raise ProtocolError("stage rgb shape mismatch")
        payload = struct.pack(
            "<QBHHI", msg.request_id, msg.stage, msg.width, msg.height, msg.render_time_us
        )
        payload += rgb.tobytes()
        if msg.depth is not None:
            depth = np.ascontiguousarray(msg.depth, dtype="<f4")
            if depth.shape != (msg.height, msg.width):
                raise ProtocolError("stage depth shape mismatch")
            payload += struct.pack("<B", 1) + depth.tobytes()
        else:
            payload += struct.pack("<B", 0)
        return TYPE_RENDER_STAGE, payload

    if isinstance(msg, Cancel):
        return TYPE_CANCEL, struct.pack("<Q", msg.request_id)

    if isinstance(msg, Stats):
        if len(msg.counters) != 8:
            raise ProtocolError("stats carries exactly 8 counters")
        return TYPE_STATS, struct.pack("<8Q", *msg.counters)

    if isinstance(msg, FramePush):
        cam_id = msg.camera_id.encode("utf-8")
        if len(cam_id) > 16:
            raise ProtocolError("camera_id longer than 16 bytes")
        payload = cam_id.ljust(16, b"\x00")
        payload += struct.pack("<Qd", msg.seq, msg.timestamp)
        payload += struct.pack("<4f", msg.fx, msg.fy, msg.cx, msg.cy)
        payload += struct.pack("<HH", msg.width, msg.height)
        payload += struct.pack("<4f", *msg.distortion)
        payload += struct.pack("<B", 1 if msg.rectified else 0)
        payload += _pack_pose(msg.pose)
        payload += struct.pack("<d", msg.depth_scale)
        payload += struct.pack("<I", len(msg.rgb_png)) + msg.rgb_png
        if msg.depth_png is not None:
            payload += struct.pack("<BI", 1, len(msg.depth_png)) + msg.depth_png
        else:
            payload += struct.pack("<BI", 0, 0)
        return TYPE_FRAME_PUSH, payload

    if isinstance(msg, ErrorMsg):
        return TYPE_ERROR, struct.pack("<QB", msg.request_id, msg.code) + msg.message.encode(
            "utf-8"
        )

    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def decode_payload(mtype: int, payload: bytes) -> Message:
    if mtype == TYPE_HELLO:
        if len(payload) != 17:
            raise ProtocolError("bad hello size")
        return Hello(client_id=payload[:16], role=payload[16])

    if mtype == TYPE_RENDER_REQUEST:
        request_id, backend_code, flags = struct.unpack_from("<QBB", payload, 0)
        off = 10
        pose, off = _unpack_pose(payload, off)
        fx, fy, cx, cy = struct.unpack_from("<4f", payload, off)
        off += 16
        width, height = struct.unpack_from("<HH", payload, off)
        off += 4
        vals = struct.unpack_from("<B6f", payload, off)
        if backend_code not in BACKEND_NAMES:
            raise ProtocolError(f"unknown backend code {backend_code}")
        crop = None
        if vals[0]:
            crop = Aabb(np.array(vals[1:4], dtype=np.float64), np.array(vals[4:7], dtype=np.float64))
        camera = PinholeCamera(
            fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height, rectified=True
        )
        return RenderRequest(
            request_id=request_id,
            backend=BACKEND_NAMES[backend_code],
            pose=pose,
            camera=camera,
            crop=crop,
            want_depth=bool(flags & FLAG_WANT_DEPTH),
            progressive=bool(flags & FLAG_PROGRESSIVE),
            continuous=bool(flags & FLAG_CONTINUOUS),
        )

    if mtype == TYPE_RENDER_STAGE:
        request_id, stage, width, height, rt_us = struct.unpack_from("<QBHHI", payload, 0)
        off = 17
        n = width * height * 3
        rgb = np.frombuffer(payload, dtype=np.uint8, count=n, offset=off).reshape(
            height, width, 3
        )
        off += n
        (depth_present,) = struct.unpack_from("<B", payload, off)
        off += 1
        depth = None
        if depth_present:
            depth = np.frombuffer(
                payload, dtype="<f4", count=width * height, offset=off
            ).reshape(height, width)
        return RenderStage(
            request_id=request_id,
            stage=stage,
            width=width,
            height=height,
            render_time_us=rt_us,
            rgb=rgb.copy(),
            depth=None if depth is None else depth.copy(),
        )

    if mtype == TYPE_CANCEL:
        return Cancel(request_id=struct.unpack("<Q", payload)[0])

    if mtype == TYPE_STATS:
        return Stats(counters=struct.unpack("<8Q", payload))

    if mtype == TYPE_FRAME_PUSH:
        camera_id = payload[:16].rstrip(b"\x00").decode("utf-8")
        off = 16
        seq, timestamp = struct.unpack_from("<Qd", payload, off)
        off += 16
        fx, fy, cx, cy = struct.unpack_from("<4f", payload, off)
        off += 16
        width, height = struct.unpack_from("<HH", payload, off)
        off += 4
        distortion = struct.unpack_from("<4f", payload, off)
        off += 16
        rectified = bool(payload[off])
        off += 1
        pose, off = _unpack_pose(payload, off)
        (depth_scale,) = struct.unpack_from("<d", payload, off)
        off += 8
        (rgb_len,) = struct.unpack_from("<I", payload, off)
        off += 4
        rgb_png = payload[off : off + rgb_len]
        off += rgb_len
        depth_present, depth_len = struct.unpack_from("<BI", payload, off)
        off += 5
        depth_png = payload[off : off + depth_len] if depth_present else None
        return FramePush(
            camera_id=camera_id,
            seq=seq,
            timestamp=timestamp,
            fx=fx,
            fy=fy,
            cx=cx,
            cy=cy,
            width=width,
            height=height,
            distortion=distortion,
            rectified=rectified,
            pose=pose,
            depth_scale=depth_scale,
            rgb_png=rgb_png,
            depth_png=depth_png,
        )

    if mtype == TYPE_ERROR:
        request_id, code = struct.unpack_from("<QB", payload, 0)
        return ErrorMsg(request_id=request_id, code=code, message=payload[9:].decode("utf-8"))

    raise ProtocolError(f"unknown message type 0x{mtype:02x}")


def encode_frame(msg: Message) -> bytes:
    mtype, payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError("payload too large")
    return HEADER.pack(MAGIC, VERSION, mtype, len(payload)) + payload


def decode_frame(buf: bytes) -> Tuple[Message, int]:
    """Decode one frame from the head of buf; returns (message, consumed)."""
    if len(buf) < HEADER.size:
        raise ProtocolError("truncated header")
    magic, version, mtype, length = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise ProtocolError("payload too large")
    end = HEADER.size + length
    if len(buf) < end:
        raise ProtocolError("truncated payload")
    return decode_payload(mtype, buf[HEADER.size : end]), end


class StreamDecoder:
    """Incremental frame decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Message]:
        self._buf.extend(data)
        out: List[Message] = []
        while True:
            if len(self._buf) < HEADER.size:
                return out
            magic, version, mtype, length = HEADER.unpack_from(self._buf, 0)
            if magic != MAGIC:
                raise ProtocolError(f"bad magic {bytes(magic)!r}")
            if version != VERSION:
                raise ProtocolError(f"unsupported version {version}")
            if length > MAX_PAYLOAD:
                raise ProtocolError("payload too large")
            end = HEADER.size + length
            if len(self._buf) < end:
                return out
            out.append(decode_payload(mtype, bytes(self._buf[HEADER.size : end])))
            del self._buf[:end]
