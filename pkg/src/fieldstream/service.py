"""Render service: per-client sessions with request supersession,
progressive-resolution scheduling interleaved with training, and the
network front ends (TCP byte stream, WebSocket for the browser console).

All scheduling and training runs on one thread; connection readers only
enqueue decoded messages, and per-connection writer threads drain bounded
outbound queues so slow clients cannot stall training.
"""

from __future__ import annotations

import io
import queue
import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import protocol
from .core import Aabb, FrameSample, PinholeCamera, Pose, RenderProduct, scale_camera
from .ingest import (
    AdmitStatus,
    FilterPolicy,
    KeyframeBuffer,
    ReplayScript,
    SensorRegistry,
    admit_frame,
    online_mode_ready,
    replay_admit,
)
from .sessionlog import read_depth_png, read_rgb_png


@dataclass
class ServiceConfig:
    pixel_slice_budget: int = 200_000  # stage pixels rendered between train steps
    checkpoint_interval: int = 50  # continuous re-render cadence, train steps
    pose_delta_threshold: float = 0.05  # meters + weighted rotation
    rotation_weight: float = 0.5
    outbound_queue_pixels: int = 4_000_000  # per-client outbound cap
    stats_interval: int = 50  # push Stats every N train steps


def progressive_plan(req: protocol.RenderRequest) -> List[Tuple[int, PinholeCamera]]:
    """Ordered (stage, camera) list: 10%, 50%, 100% when progressive."""
    if not req.progressive:
        return [(protocol.STAGE_S100, req.camera)]
    return [
        (stage, scale_camera(req.camera, frac))
        for stage, frac in sorted(protocol.STAGE_FRACTIONS.items())
    ]


@dataclass
class PendingRequest:
    req: protocol.RenderRequest
    stages: deque  # of (stage_code, camera)


@dataclass
class ClientSession:
    client_id: bytes
    last_request_id: Optional[int] = None
    pending: Optional[PendingRequest] = None
    requests_served: int = 0
    stages_dropped: int = 0
    # continuous-mode bookkeeping
    last_trigger_pose: Optional[Pose] = None
    steps_since_render: int = 0


@dataclass(frozen=True)
class SubmitResult:
    status: str  # "accepted" | "superseded" | "rejected"
    superseded_request_id: Optional[int] = None
    reason: Optional[str] = None


def _pose_distance(a: Pose, b: Pose, rotation_weight: float) -> float:
    from .core import geodesic_angle

    return float(np.linalg.norm(a.trans - b.trans)) + rotation_weight * geodesic_angle(
        a.quat, b.quat
    )


class Counters:
    def __init__(self):
        self.frames_received = 0
        self.frames_admitted = 0
        self.requests_received = 0
        self.requests_superseded = 0
        self.stages_sent = 0
        self.stages_dropped = 0
        self.train_steps = 0

    def snapshot(self, buffer_count: int) -> protocol.Stats:
        return protocol.Stats(
            counters=(
                self.frames_received,
                self.frames_admitted,
                self.requests_received,
                self.requests_superseded,
                self.stages_sent,
                self.stages_dropped,
                self.train_steps,
                buffer_count,
            )
        )


class RenderScheduler:
    """Single-consumer scheduler: owns all sessions and decides which
    stages render between training steps."""

    def __init__(self, backends: Dict[str, object], config: ServiceConfig):
        self.backends = backends
        self.config = config
        self.sessions: Dict[bytes, ClientSession] = {}
        self.counters = Counters()
        self.latest_sensor_pose: Optional[Pose] = None

    def session(self, client_id: bytes) -> ClientSession:
        s = self.sessions.get(client_id)
        if s is None:
            s = ClientSession(client_id=client_id)
            self.sessions[client_id] = s
        return s

    def submit_request(self, client_id: bytes, req: protocol.RenderRequest) -> SubmitResult:
        self.counters.requests_received += 1
        s = self.session(client_id)
        if s.last_request_id is not None and req.request_id <= s.last_request_id:
            return SubmitResult("rejected", reason="stale")
        if req.backend not in self.backends:
            return SubmitResult("rejected", reason="backend")
        prior = s.pending
        s.pending = PendingRequest(req=req, stages=deque(progressive_plan(req)))
        s.last_request_id = req.request_id
        s.last_trigger_pose = self.latest_sensor_pose
        s.steps_since_render = 0
        if prior is not None and prior.stages:
            self.counters.requests_superseded += 1
            return SubmitResult("superseded", superseded_request_id=prior.req.request_id)
        return SubmitResult("accepted")

    def cancel(self, client_id: bytes, request_id: int) -> None:
        s = self.sessions.get(client_id)
        if s and s.pending and s.pending.req.request_id == request_id:
            s.pending = None

    def observe_frame_pose(self, pose: Pose) -> None:
        self.latest_sensor_pose = pose

    def on_train_step(self) -> None:
        """Re-arm continuous requests on pose movement or cadence."""
        self.counters.train_steps += 1
        for s in self.sessions.values():
            p = s.pending
            if p is None or not p.req.continuous or p.stages:
                continue
            s.steps_since_render += 1
            moved = False
            if self.latest_sensor_pose is not None and s.last_trigger_pose is not None:
                moved = (
                    _pose_distance(
                        self.latest_sensor_pose, s.last_trigger_pose, self.config.rotation_weight
                    )
                    > self.config.pose_delta_threshold
                )
            elif self.latest_sensor_pose is not None and s.last_trigger_pose is None:
                moved = True
            if moved or s.steps_since_render >= self.config.checkpoint_interval:
                p.stages = deque(progressive_plan(p.req))
                s.last_trigger_pose = self.latest_sensor_pose
                s.steps_since_render = 0

    def next_slice(self) -> List[Tuple[bytes, protocol.Message]]:
        """Render queued stages within the pixel budget; at least one stage
        makes progress per slice regardless of its size."""
        out: List[Tuple[bytes, protocol.Message]] = []
        budget = self.config.pixel_slice_budget
        rendered_any = True
        while rendered_any:
            rendered_any = False
            for cid in sorted(self.sessions.keys()):
                s = self.sessions[cid]
                p = s.pending
                if p is None or not p.stages:
                    continue
                stage_code, cam = p.stages[0]
                pixels = cam.width * cam.height
                if pixels > budget and out:
                    continue
                p.stages.popleft()
                req = p.req
                try:
                    backend = self.backends[req.backend]
                    product: RenderProduct = backend.render(cam, req.pose, req.crop)
                except Exception as exc:  # render failure -> error stage, keep serving
                    out.append(
                        (cid, protocol.ErrorMsg(request_id=req.request_id, code=3, message=str(exc)))
                    )
                    s.pending = None
                    continue
                budget = max(0, budget - pixels)
                rgb8 = np.clip(np.round(product.rgb * 255.0), 0, 255).astype(np.uint8)
                depth = (
                    product.depth.astype("<f4") if req.want_depth else None
                )
                out.append(
                    (
                        cid,
                        protocol.RenderStage(
                            request_id=req.request_id,
                            stage=stage_code,
                            width=cam.width,
                            height=cam.height,
                            render_time_us=int(product.render_time * 1e6),
                            rgb=rgb8,
                            depth=depth,
                        ),
                    )
                )
                self.counters.stages_sent += 1
                rendered_any = True
                if not p.stages:
                    s.requests_served += 1
                    if not req.continuous:
                        s.pending = None
                if budget == 0:
                    return out
        return out


# ---------------------------------------------------------------------------
# frame-push handling


def frame_from_push(msg: protocol.FramePush) -> Tuple[FrameSample, bool]:
    """Decode a FramePush into a FrameSample; returns (frame, has_depth)."""
    rgb = read_rgb_png(io.BytesIO(msg.rgb_png))
    depth = None
    if msg.depth_png is not None:
        depth = read_depth_png(io.BytesIO(msg.depth_png), msg.depth_scale)
    camera = PinholeCamera(
        fx=msg.fx,
        fy=msg.fy,
        cx=msg.cx,
        cy=msg.cy,
        width=msg.width,
        height=msg.height,
        distortion=np.array(msg.distortion, dtype=np.float64),
        rectified=msg.rectified,
    )
    frame = FrameSample(
        camera_id=msg.camera_id,
        seq=msg.seq,
        timestamp=msg.timestamp,
        rgb=rgb,
        depth=depth,
        pose=msg.pose,
        camera=camera,
    )
    return frame, depth is not None


class IngestState:
    """Registry + lazily created buffer; the buffer is preallocated when
    the first frame arrives (or up front in replay mode)."""

    def __init__(self, capacity: int, policy: FilterPolicy):
        self.capacity = capacity
        self.policy = policy
        self.registry = SensorRegistry()
        self.buffer: Optional[KeyframeBuffer] = None
        self.script: Optional[ReplayScript] = None

    def ensure_buffer(self) -> KeyframeBuffer:
        if self.buffer is None:
            self.buffer = KeyframeBuffer.from_registry(self.capacity, self.registry)
        return self.buffer

    def handle_frame(self, frame: FrameSample, has_depth: bool) -> AdmitStatus:
        if frame.camera_id not in self.registry:
            if self.buffer is not None and not has_depth and self.buffer.depth_enabled:
                raise ValueError("cannot register depthless camera on a depth-enabled buffer")
            self.registry.register(frame.camera_id, frame.camera, has_depth)
        buf = self.ensure_buffer()
        if self.script is not None:
            result = replay_admit(buf, self.registry, frame, self.script)
        else:
            result = admit_frame(buf, self.registry, frame, self.policy)
        return result.status


# ---------------------------------------------------------------------------
# network server


class _ClientConn:
    """One connected client: socket, writer thread, bounded outbound queue."""

    def __init__(self, sock: socket.socket, addr, cap_pixels: int):
        self.sock = sock
        self.addr = addr
        self.client_id: Optional[bytes] = None
        self.cap_pixels = cap_pixels
        self.queue: deque = deque()  # of (request_id or None, n_pixels, encoded bytes)
        self.queued_pixels = 0
        self.cond = threading.Condition()
        self.alive = True
        self.dropped = 0

    def enqueue(self, msg: protocol.Message, last_request_id: Optional[int]) -> None:
        if isinstance(msg, protocol.RenderStage):
            rid, pixels = msg.request_id, msg.width * msg.height
        else:
            rid, pixels = None, 0
        data = protocol.encode_frame(msg)
        with self.cond:
            self.queue.append((rid, pixels, data))
            self.queued_pixels += pixels
            # beyond the cap: drop oldest superseded-stage messages first,
            # then oldest stages
            while self.queued_pixels > self.cap_pixels:
                drop_i = None
                for i, (qrid, qpix, _) in enumerate(self.queue):
                    if (
                        qpix > 0
                        and qrid is not None
                        and last_request_id is not None
                        and qrid < last_request_id
                    ):
                        drop_i = i
                        break
                if drop_i is None:
                    for i, (qrid, qpix, _) in enumerate(self.queue):
                        if qpix > 0:
                            drop_i = i
                            break
                if drop_i is None:
                    break
                _, qpix, _ = self.queue[drop_i]
                del self.queue[drop_i]
                self.queued_pixels -= qpix
                self.dropped += 1
            self.cond.notify()

    def writer_loop(self) -> None:
        while True:
            with self.cond:
                while self.alive and not self.queue:
                    self.cond.wait(timeout=0.5)
                if not self.alive and not self.queue:
                    return
                if not self.queue:
                    continue
                _, pixels, data = self.queue.popleft()
                self.queued_pixels -= pixels
            try:
                self.sock.sendall(data)
            except OSError:
                with self.cond:
                    self.alive = False
                return

    def close(self) -> None:
        with self.cond:
            self.alive = False
            self.cond.notify()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class RenderServer:
    """TCP front end + cooperative train/render loop."""

    def __init__(
        self,
        backends: Dict[str, object],
        ingest_state: IngestState,
        config: ServiceConfig,
        host: str = "127.0.0.1",
        port: int = 0,
        train_seed: int = 0,
    ):
        self.scheduler = RenderScheduler(backends, config)
        self.ingest = ingest_state
        self.config = config
        self.inbox: "queue.Queue[tuple]" = queue.Queue()
        self.conns: Dict[bytes, _ClientConn] = {}
        self._conn_lock = threading.Lock()
        self.stop_event = threading.Event()
        self.train_seed = train_seed
        self.train_enabled = True
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind((host, port))
        self.listener.listen(16)
        self.address = self.listener.getsockname()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)

    # -- connection plumbing --------------------------------------------------

    def start_io(self) -> None:
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        self.listener.settimeout(0.25)
        while not self.stop_event.is_set():
            try:
                sock, addr = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn = _ClientConn(sock, addr, self.config.outbound_queue_pixels)
            threading.Thread(target=self._reader_loop, args=(conn,), daemon=True).start()
            threading.Thread(target=conn.writer_loop, daemon=True).start()

    def _reader_loop(self, conn: _ClientConn) -> None:
        decoder = protocol.StreamDecoder()
        conn.sock.settimeout(0.25)
        while not self.stop_event.is_set() and conn.alive:
            try:
                data = conn.sock.recv(1 << 16)
            except socket.timeout:
                continue
            except OSError:
                break
            if not data:
                break
            try:
                for msg in decoder.feed(data):
                    self._on_message(conn, msg)
            except protocol.ProtocolError:
                break
        conn.close()
        if conn.client_id is not None:
            with self._conn_lock:
                if self.conns.get(conn.client_id) is conn:
                    del self.conns[conn.client_id]

    def _on_message(self, conn: _ClientConn, msg: protocol.Message) -> None:
        if isinstance(msg, protocol.Hello):
            conn.client_id = msg.client_id
            with self._conn_lock:
                self.conns[msg.client_id] = conn
            return
        self.inbox.put((conn.client_id, msg))

    def send_to(self, client_id: bytes, msg: protocol.Message) -> None:
        with self._conn_lock:
            conn = self.conns.get(client_id)
        if conn is None:
            return
        sess = self.scheduler.sessions.get(client_id)
        last_rid = sess.last_request_id if sess else None
        conn.enqueue(msg, last_rid)
        self.scheduler.counters.stages_dropped += conn.dropped
        conn.dropped = 0

    # -- scheduler-side message handling ---------------------------------------

    def _drain_inbox(self) -> None:
        while True:
            try:
                client_id, msg = self.inbox.get_nowait()
            except queue.Empty:
                return
            self.handle_message(client_id, msg)

    def handle_message(self, client_id: Optional[bytes], msg: protocol.Message) -> None:
        if isinstance(msg, protocol.RenderRequest):
            if client_id is None:
                return
            result = self.scheduler.submit_request(client_id, msg)
            if result.status == "rejected":
                code = 1 if result.reason == "stale" else 2
                self.send_to(
                    client_id,
                    protocol.ErrorMsg(request_id=msg.request_id, code=code, message=result.reason),
                )
        elif isinstance(msg, protocol.Cancel):
            if client_id is not None:
                self.scheduler.cancel(client_id, msg.request_id)
        elif isinstance(msg, protocol.FramePush):
            self.scheduler.counters.frames_received += 1
            try:
                frame, has_depth = frame_from_push(msg)
                status = self.ingest.handle_frame(frame, has_depth)
            except (ValueError, OSError):
                return
            if status is AdmitStatus.ADMITTED:
                self.scheduler.counters.frames_admitted += 1
                self.scheduler.observe_frame_pose(frame.pose)

    # -- the serve loop ---------------------------------------------------------

    def run_once(self) -> bool:
        """One scheduler cycle: inbox, one training step (when ready), then
        a render slice. Returns True when any work happened."""
        worked = False
        self._drain_inbox()
        buf = self.ingest.buffer
        ready = buf is not None and online_mode_ready(buf, self.ingest.policy)
        if ready and self.train_enabled:
            for backend in self.scheduler.backends.values():
                backend.train_step(buf, self.train_seed + self.scheduler.counters.train_steps)
            self.scheduler.on_train_step()
            worked = True
            if self.scheduler.counters.train_steps % self.config.stats_interval == 0:
                stats = self.scheduler.counters.snapshot(buf.count if buf else 0)
                with self._conn_lock:
                    ids = list(self.conns.keys())
                for cid in ids:
                    self.send_to(cid, stats)
        if ready or not self.train_enabled:
            for cid, msg in self.scheduler.next_slice():
                self.send_to(cid, msg)
                worked = True
        return worked

    def serve_forever(self) -> None:
        self.start_io()
        while not self.stop_event.is_set():
            if not self.run_once():
                time.sleep(0.005)

    def shutdown(self) -> None:
        self.stop_event.set()
        try:
            self.listener.close()
        except OSError:
            pass
        with self._conn_lock:
            conns = list(self.conns.values())
        for c in conns:
            c.close()
