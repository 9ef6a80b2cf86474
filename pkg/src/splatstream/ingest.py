"""Timed-stream transport and synchronization.

Wire format (one message), all integers big-endian:

    magic "SPST" | version u8 = 1 | modality u8 | timestamp_ns u64 |
    payload_len u32 | payload | crc32c u32 over header+payload

Modalities: 0 frame, 1 gps, 2 imu, 3 control.
    frame payload:   seq u32 | PNG bytes
    gps payload:     3 x f64 (lat deg, lon deg, alt m)
    imu payload:     6 x f64 (wx wy wz rad/s, ax ay az m/s^2)
    control payload: UTF-8 "key=value [key=value ...]" text

A receiver that hits a bad checksum (or a malformed header) skips forward to
the next magic and counts the event; framing is never fatal. Per-modality
queues are single-producer/single-consumer: the connection demultiplexer
feeds them, the aligner drains them. Frame queues are bounded and drop the
oldest entry on overflow (freshness wins); telemetry queues are unbounded.
When the frame queue sits above 80% occupancy for a second, the server asks
the sender to halve its resolution via a control message on the same
connection.

Alignment: GPS is linearly interpolated at the frame timestamp when
bracketing fixes exist inside the window, otherwise the nearest fix within
the window is used. IMU angular velocity is integrated trapezoidally over
the inter-frame interval into a rotation-vector orientation delta. A needed
modality with no sample inside the window raises AlignmentGapError.

The restreamer replays a recorded capture (manifest: one line per sample,
`<timestamp_ns> <modality> <path-or-inline-values>`) over this wire format,
pacing sends by the original timestamps scaled by a rate multiplier, with
optional uniform jitter that never reorders samples within a modality.
"""

from __future__ import annotations

import os
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import AlignmentGapError, InputError, StreamEndedError

MAGIC = b"SPST"
VERSION = 1
_HEADER = struct.Struct(">4sBBQI")
_CRC = struct.Struct(">I")

DEFAULT_WINDOW_NS = 50_000_000
DEFAULT_PORT = 7504
BIND_ENV = "SPST_BIND"


class Modality(IntEnum):
    FRAME = 0
    GPS = 1
    IMU = 2
    CONTROL = 3


# -- CRC-32C (Castagnoli), reflected polynomial 0x82F63B78 --------------------

def _crc32c_table():
    table = np.zeros(256, dtype=np.uint32)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ 0x82F63B78 if crc & 1 else crc >> 1
        table[i] = crc
    return table


_CRC_TABLE = _crc32c_table()

try:  # the byte loop dominates frame throughput without the JIT
    from numba import njit

    @njit(cache=True)
    def _crc32c_loop(data, table, crc):
        crc = ~crc & 0xFFFFFFFF
        for i in range(len(data)):
            crc = (crc >> 8) ^ table[(crc ^ np.uint32(data[i])) & 0xFF]
        return ~crc & 0xFFFFFFFF

    def crc32c(data: bytes, crc: int = 0) -> int:
        return int(_crc32c_loop(np.frombuffer(data, dtype=np.uint8),
                                _CRC_TABLE, crc))
except ImportError:  # pragma: no cover - numba is a declared dependency
    def crc32c(data: bytes, crc: int = 0) -> int:
        crc = ~crc & 0xFFFFFFFF
        table = _CRC_TABLE
        for byte in data:
            crc = (crc >> 8) ^ int(table[(crc ^ byte) & 0xFF])
        return ~crc & 0xFFFFFFFF


# -- sample model -------------------------------------------------------------

@dataclass
class FramePayload:
    seq: int
    png: bytes

    def image(self):
        from .imgio import from_png_bytes
        return from_png_bytes(self.png)


@dataclass
class GpsFix:
    lat: float
    lon: float
    alt: float


@dataclass
class ImuReading:
    angular_velocity: np.ndarray  # (3,) rad/s
    acceleration: np.ndarray      # (3,) m/s^2


@dataclass
class TimedSample:
    modality: Modality
    timestamp_ns: int
    payload: object


@dataclass
class ControlMessage:
    timestamp_ns: int
    fields: dict


def encode_message(modality: Modality, timestamp_ns: int, payload: bytes) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, int(modality), timestamp_ns,
                        len(payload))
    return head + payload + _CRC.pack(crc32c(head + payload))


def encode_sample(sample: TimedSample) -> bytes:
    if sample.modality == Modality.FRAME:
        payload = struct.pack(">I", sample.payload.seq) + sample.payload.png
    elif sample.modality == Modality.GPS:
        p = sample.payload
        payload = struct.pack(">3d", p.lat, p.lon, p.alt)
    elif sample.modality == Modality.IMU:
        p = sample.payload
        payload = struct.pack(">6d", *p.angular_velocity, *p.acceleration)
    else:
        raise InputError(f"cannot encode modality {sample.modality}")
    return encode_message(sample.modality, sample.timestamp_ns, payload)


def encode_control(timestamp_ns: int, fields: dict) -> bytes:
    text = " ".join(f"{k}={v}" for k, v in fields.items())
    return encode_message(Modality.CONTROL, timestamp_ns, text.encode())


def _decode_payload(modality: int, timestamp_ns: int, payload: bytes):
    if modality == Modality.FRAME:
        if len(payload) < 4:
            return None
        seq = struct.unpack_from(">I", payload)[0]
        return TimedSample(Modality.FRAME, timestamp_ns,
                           FramePayload(seq=seq, png=payload[4:]))
    if modality == Modality.GPS:
        if len(payload) != 24:
            return None
        lat, lon, alt = struct.unpack(">3d", payload)
        return TimedSample(Modality.GPS, timestamp_ns, GpsFix(lat, lon, alt))
    if modality == Modality.IMU:
        if len(payload) != 48:
            return None
        vals = struct.unpack(">6d", payload)
        return TimedSample(Modality.IMU, timestamp_ns,
                           ImuReading(np.array(vals[:3]), np.array(vals[3:])))
    if modality == Modality.CONTROL:
        try:
            fields = dict(part.split("=", 1)
                          for part in payload.decode().split())
        except (UnicodeDecodeError, ValueError):
            return None
        return ControlMessage(timestamp_ns, fields)
    return None


class MessageParser:
    """Incremental wire-format parser. Feed bytes, iterate samples.

    Corrupt messages (bad magic, version, checksum, or payload) are counted
    in `skipped` and scanning resumes at the next magic."""

    MAX_PAYLOAD = 64 * 1024 * 1024

    def __init__(self):
        self.buffer = bytearray()
        self.skipped = 0
        self.yielded = 0

    def feed(self, data: bytes):
        self.buffer += data
        out = []
        while True:
            msg = self._next()
            if msg is None:
                break
            out.append(msg)
            self.yielded += 1
        return out

    def _resync(self):
        """Drop garbage up to the next magic; count one skip per resync."""
        idx = self.buffer.find(MAGIC, 1)
        self.skipped += 1
        if idx < 0:
            tail = len(MAGIC) - 1
            del self.buffer[:max(0, len(self.buffer) - tail)]
        else:
            del self.buffer[:idx]

    def _next(self):
        while True:
            if len(self.buffer) < _HEADER.size:
                return None
            magic, version, modality, ts, plen = _HEADER.unpack_from(self.buffer)
            if magic != MAGIC or version != VERSION or modality > 3 \
                    or plen > self.MAX_PAYLOAD:
                self._resync()
                continue
            total = _HEADER.size + plen + _CRC.size
            if len(self.buffer) < total:
                return None
            body = bytes(self.buffer[:_HEADER.size + plen])
            (crc,) = _CRC.unpack_from(self.buffer, _HEADER.size + plen)
            if crc32c(body) != crc:
                self._resync()
                continue
            decoded = _decode_payload(modality, ts, body[_HEADER.size:])
            del self.buffer[:total]
            if decoded is None:
                self.skipped += 1
                continue
            return decoded


class IngestStream:
    """Iterate TimedSamples (and ControlMessages) off a socket connection."""

    def __init__(self, connection: socket.socket, chunk_size: int = 65536):
        self.connection = connection
        self.chunk_size = chunk_size
        self.parser = MessageParser()
        self.ended = False
        self.end_reason = None

    @property
    def skipped(self):
        return self.parser.skipped

    @property
    def yielded(self):
        return self.parser.yielded

    def __iter__(self):
        while True:
            try:
                chunk = self.connection.recv(self.chunk_size)
            except OSError as e:
                self.ended = True
                self.end_reason = str(e)
                raise StreamEndedError(self.yielded, self.skipped,
                                       reason=str(e)) from e
            if not chunk:
                self.ended = True
                self.end_reason = "eof"
                return
            yield from self.parser.feed(chunk)


def ingest_stream(connection) -> IngestStream:
    return IngestStream(connection)


# -- configuration and queues -------------------------------------------------

@dataclass
class IngestConfig:
    window_ns: int = DEFAULT_WINDOW_NS
    decimation: str = "none"           # none | uniform | adaptive
    uniform_keep_every: int = 1
    adaptive_pixel_threshold: float = 0.02
    adaptive_rotation_threshold: float = 0.05  # radians
    frame_queue_capacity: int = 16
    require_gps: bool = False
    require_imu: bool = False

    def __post_init__(self):
        if self.window_ns <= 0:
            raise InputError("window_ns must be positive")
        if self.uniform_keep_every < 1:
            raise InputError("uniform_keep_every must be >= 1")
        if self.decimation not in ("none", "uniform", "adaptive"):
            raise InputError(f"unknown decimation mode {self.decimation}")


class DropOldestQueue:
    """Bounded SPSC queue that discards the oldest entry when full."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items = deque()
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self.dropped = 0

    def put(self, item):
        with self._ready:
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._ready.notify()

    def get(self, timeout=None):
        with self._ready:
            if not self._items:
                self._ready.wait(timeout)
            if not self._items:
                return None
            return self._items.popleft()

    def __len__(self):
        with self._lock:
            return len(self._items)

    def occupancy(self) -> float:
        return len(self) / self.capacity


# -- alignment ----------------------------------------------------------------

@dataclass
class SyncedRecord:
    frame: FramePayload
    frame_ts: int
    gps: GpsFix | None
    gps_flag: str                 # exact | interpolated | nearest | missing
    imu_delta: np.ndarray | None  # rotation vector over the frame interval
    imu_flag: str                 # integrated | missing
    residuals_ns: dict = field(default_factory=dict)

    def rotation_angle(self) -> float:
        if self.imu_delta is None:
            return 0.0
        return float(np.linalg.norm(self.imu_delta))


def _nearest_gap(queue, ts: int):
    if not queue:
        return None
    return min(abs(int(s.timestamp_ns) - int(ts)) for s in queue)


def _interp_gps(queue, ts: int, window_ns: int):
    before = after = None
    for s in queue:
        if s.timestamp_ns <= ts:
            if before is None or s.timestamp_ns > before.timestamp_ns:
                before = s
        if s.timestamp_ns >= ts:
            if after is None or s.timestamp_ns < after.timestamp_ns:
                after = s
    exact = next((s for s in queue if s.timestamp_ns == ts), None)
    if exact is not None:
        return exact.payload, "exact", 0
    in_window = lambda s: abs(int(s.timestamp_ns) - int(ts)) <= window_ns
    if before is not None and after is not None and in_window(before) \
            and in_window(after):
        t0, t1 = int(before.timestamp_ns), int(after.timestamp_ns)
        w = (int(ts) - t0) / (t1 - t0)
        p0, p1 = before.payload, after.payload
        fix = GpsFix(lat=p0.lat + w * (p1.lat - p0.lat),
                     lon=p0.lon + w * (p1.lon - p0.lon),
                     alt=p0.alt + w * (p1.alt - p0.alt))
        return fix, "interpolated", min(int(ts) - t0, t1 - int(ts))
    candidates = [s for s in queue if in_window(s)]
    if candidates:
        nearest = min(candidates,
                      key=lambda s: abs(int(s.timestamp_ns) - int(ts)))
        return nearest.payload, "nearest", abs(int(nearest.timestamp_ns) - int(ts))
    return None, "missing", _nearest_gap(queue, ts)


def _piecewise_omega(queue):
    ts = np.array([int(s.timestamp_ns) for s in queue], dtype=np.float64)
    om = np.stack([s.payload.angular_velocity for s in queue])
    return ts, om


def _integrate_imu(queue, t0: int, t1: int):
    """Trapezoidal integral of angular velocity over [t0, t1] seconds,
    treating omega as piecewise linear between samples (held flat outside)."""
    if not queue or t1 <= t0:
        return np.zeros(3)
    ts, om = _piecewise_omega(queue)

    def omega_at(t):
        return np.array([np.interp(t, ts, om[:, k]) for k in range(3)])

    knots = [float(t0)] + [float(t) for t in ts if t0 < t < t1] + [float(t1)]
    total = np.zeros(3)
    for a, b in zip(knots, knots[1:]):
        total += 0.5 * (omega_at(a) + omega_at(b)) * (b - a)
    return total * 1e-9  # ns -> s


def align(frame_sample: TimedSample, gps_queue, imu_queue,
          config: IngestConfig, prev_frame_ts: int | None = None) -> SyncedRecord:
    """Fuse the sensor queues around one frame into a SyncedRecord."""
    ts = int(frame_sample.timestamp_ns)
    window = config.window_ns
    residuals = {}

    gps_fix, gps_flag, gps_gap = (None, "missing", None)
    if gps_queue is not None:
        gps_fix, gps_flag, gps_gap = _interp_gps(list(gps_queue), ts, window)
        if gps_flag == "missing" and config.require_gps:
            raise AlignmentGapError("gps", gps_gap if gps_gap is not None else -1,
                                    window)
        if gps_gap is not None and gps_flag != "missing":
            residuals["gps"] = int(gps_gap)

    imu_delta, imu_flag = None, "missing"
    if imu_queue is not None:
        imu_list = list(imu_queue)
        gap = _nearest_gap(imu_list, ts)
        if gap is None or gap > window:
            if config.require_imu:
                raise AlignmentGapError("imu", gap if gap is not None else -1,
                                        window)
        else:
            start = prev_frame_ts if prev_frame_ts is not None else ts
            imu_delta = _integrate_imu(imu_list, start, ts)
            imu_flag = "integrated"
            residuals["imu"] = int(gap)

    for name, value in residuals.items():
        if value > window:
            raise AlignmentGapError(name, value, window)

    return SyncedRecord(frame=frame_sample.payload, frame_ts=ts,
                        gps=gps_fix, gps_flag=gps_flag,
                        imu_delta=imu_delta, imu_flag=imu_flag,
                        residuals_ns=residuals)


class Aligner:
    """Stateful wrapper: drains a frame queue against sensor deques."""

    def __init__(self, config: IngestConfig):
        self.config = config
        self.gps_queue = deque(maxlen=4096)
        self.imu_queue = deque(maxlen=16384)
        self.prev_frame_ts = None

    def offer(self, sample: TimedSample):
        if sample.modality == Modality.GPS:
            self.gps_queue.append(sample)
        elif sample.modality == Modality.IMU:
            self.imu_queue.append(sample)

    def align_frame(self, frame_sample: TimedSample) -> SyncedRecord:
        record = align(frame_sample,
                       self.gps_queue if (self.gps_queue or self.config.require_gps) else None,
                       self.imu_queue if (self.imu_queue or self.config.require_imu) else None,
                       self.config, self.prev_frame_ts)
        self.prev_frame_ts = int(frame_sample.timestamp_ns)
        return record


# -- decimation ---------------------------------------------------------------

def decimate(records, config: IngestConfig):
    """Filter SyncedRecords per the configured mode. The first record is
    always kept. Adaptive mode keeps a record when the mean absolute pixel
    difference to the last kept frame, or the integrated IMU rotation since
    it, exceeds its threshold."""
    if config.decimation == "none":
        yield from records
        return
    if config.decimation == "uniform":
        for i, record in enumerate(records):
            if i % config.uniform_keep_every == 0:
                yield record
        return

    last_image = None
    rotation_since = 0.0
    for i, record in enumerate(records):
        image = record.frame.image()
        rotation_since += record.rotation_angle()
        if i == 0:
            yield record
            last_image = image
            rotation_since = 0.0
            continue
        diff = float(np.mean(np.abs(image - last_image)))
        if diff > config.adaptive_pixel_threshold \
                or rotation_since > config.adaptive_rotation_threshold:
            yield record
            last_image = image
            rotation_since = 0.0


# -- capture manifests ---------------------------------------------------------

def write_capture(directory, samples):
    """Write samples as a replayable capture: manifest + frame PNG files."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, s in enumerate(sorted(samples, key=lambda s: s.timestamp_ns)):
        if s.modality == Modality.FRAME:
            rel = f"frame_{i:06d}.png"
            with open(os.path.join(directory, rel), "wb") as f:
                f.write(s.payload.png)
            lines.append(f"{s.timestamp_ns} frame {rel}")
        elif s.modality == Modality.GPS:
            p = s.payload
            lines.append(f"{s.timestamp_ns} gps {p.lat!r},{p.lon!r},{p.alt!r}")
        elif s.modality == Modality.IMU:
            p = s.payload
            vals = ",".join(repr(float(v)) for v in
                            (*p.angular_velocity, *p.acceleration))
            lines.append(f"{s.timestamp_ns} imu {vals}")
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_capture(directory):
    """Parse a capture manifest into TimedSamples (frames hold PNG bytes)."""
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise InputError(f"missing capture manifest: {manifest}")
    samples = []
    seq = 0
    with open(manifest) as f:
        for no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 2)
            if len(parts) != 3:
                raise InputError(f"{manifest}:{no}: expected 3 fields")
            ts, modality, rest = int(parts[0]), parts[1], parts[2]
            if modality == "frame":
                path = os.path.join(directory, rest)
                if not os.path.exists(path):
                    raise InputError(f"{manifest}:{no}: missing frame file {rest}")
                with open(path, "rb") as pf:
                    samples.append(TimedSample(Modality.FRAME, ts,
                                               FramePayload(seq, pf.read())))
                seq += 1
            elif modality == "gps":
                lat, lon, alt = (float(v) for v in rest.split(","))
                samples.append(TimedSample(Modality.GPS, ts,
                                           GpsFix(lat, lon, alt)))
            elif modality == "imu":
                vals = [float(v) for v in rest.split(",")]
                if len(vals) != 6:
                    raise InputError(f"{manifest}:{no}: imu needs 6 values")
                samples.append(TimedSample(Modality.IMU, ts,
                                           ImuReading(np.array(vals[:3]),
                                                      np.array(vals[3:]))))
            else:
                raise InputError(f"{manifest}:{no}: unknown modality {modality}")
    return samples


# -- restreamer ----------------------------------------------------------------

@dataclass
class TransmissionReport:
    sent: int = 0
    acked: int = 0
    per_modality: dict = field(default_factory=dict)
    duration_s: float = 0.0
    send_lag_ms: list = field(default_factory=list)
    resolution_factor: float = 1.0

    def lag_percentile(self, pct: float) -> float:
        if not self.send_lag_ms:
            return 0.0
        return float(np.percentile(self.send_lag_ms, pct))


def restream(capture_dir, target_address, rate_multiplier: float = 1.0,
             jitter_ms: float = 0.0, seed: int = 0,
             connect_timeout: float = 5.0) -> TransmissionReport:
    """Replay a capture over TCP with original pacing.

    Send times follow the recorded timestamps scaled by 1/rate_multiplier;
    jitter (uniform +-jitter_ms) perturbs them but per-modality order is
    enforced by clamping, so samples of one modality never reorder. Control
    messages arriving from the receiver (resolution factor requests) apply
    to subsequent frames.
    """
    if rate_multiplier <= 0:
        raise InputError("rate_multiplier must be positive")
    samples = read_capture(capture_dir)
    if not samples:
        raise InputError(f"capture {capture_dir} is empty")

    rng = np.random.default_rng(seed)
    base_ts = min(s.timestamp_ns for s in samples)
    schedule = []
    last_per_modality: dict = {}
    for s in sorted(samples, key=lambda s: (s.timestamp_ns, int(s.modality))):
        offset = (int(s.timestamp_ns) - int(base_ts)) / 1e9 / rate_multiplier
        if jitter_ms > 0:
            offset += float(rng.uniform(-jitter_ms, jitter_ms)) / 1e3
        prev = last_per_modality.get(s.modality)
        if prev is not None and offset < prev:
            offset = prev
        last_per_modality[s.modality] = offset
        schedule.append((offset, s))
    schedule.sort(key=lambda pair: pair[0])

    report = TransmissionReport()
    conn = socket.create_connection(_parse_address(target_address),
                                    timeout=connect_timeout)
    conn.setblocking(False)
    control_parser = MessageParser()
    resolution = 1.0
    try:
        crc32c(b"")  # JIT warm-up stays out of the pacing schedule
        start = time.monotonic()
        for offset, sample in schedule:
            while True:
                lag = time.monotonic() - start - offset
                if lag >= 0:
                    break
                _poll_control(conn, control_parser)
                time.sleep(min(-lag, 0.002))
            for msg in _poll_control(conn, control_parser):
                if isinstance(msg, ControlMessage) and "resolution" in msg.fields:
                    resolution = float(msg.fields["resolution"])
            if sample.modality == Modality.FRAME and resolution < 1.0:
                sample = _scale_frame(sample, resolution)
                report.resolution_factor = resolution
            data = encode_sample(sample)
            conn.setblocking(True)
            conn.sendall(data)
            conn.setblocking(False)
            report.sent += 1
            report.acked += 1  # TCP delivery; no application-level ack
            name = sample.modality.name.lower()
            report.per_modality[name] = report.per_modality.get(name, 0) + 1
            report.send_lag_ms.append(
                (time.monotonic() - start - offset) * 1e3)
        report.duration_s = time.monotonic() - start
    finally:
        conn.close()
    return report


def _poll_control(conn, parser):
    try:
        chunk = conn.recv(65536)
    except (BlockingIOError, InterruptedError):
        return []
    except OSError:
        return []
    if not chunk:
        return []
    return [m for m in parser.feed(chunk) if isinstance(m, ControlMessage)]


def _scale_frame(sample: TimedSample, factor: float) -> TimedSample:
    import cv2

    from .imgio import encode_image, from_png_bytes
    image = from_png_bytes(sample.payload.png)
    h = max(1, int(image.shape[0] * factor))
    w = max(1, int(image.shape[1] * factor))
    small = cv2.resize(encode_image(image), (w, h),
                       interpolation=cv2.INTER_AREA)
    ok, buf = cv2.imencode(".png", small)
    if not ok:
        raise InputError("PNG re-encoding failed during downscale")
    return TimedSample(Modality.FRAME, sample.timestamp_ns,
                       FramePayload(sample.payload.seq, buf.tobytes()))


def _parse_address(address) -> tuple:
    if isinstance(address, tuple):
        return address
    host, _, port = address.rpartition(":")
    return (host or "127.0.0.1", int(port))


def resolve_bind_address(cli_value=None) -> tuple:
    """Listen address: CLI flag wins over SPST_BIND, then the default."""
    value = cli_value or os.environ.get(BIND_ENV) \
        or f"127.0.0.1:{DEFAULT_PORT}"
    return _parse_address(value)


# -- ingest server --------------------------------------------------------------

class IngestServer:
    """Accepts publisher connections and demultiplexes samples into queues.

    One receiving thread per connection; one shared frame queue (bounded,
    drop-oldest) and unbounded telemetry deques guarded by the aligner
    thread's single-consumer discipline. Sustained frame-queue pressure
    (>80% for 1 s) triggers a halve-resolution control message back to
    every publisher.
    """

    def __init__(self, bind=None, config: IngestConfig | None = None):
        self.config = config or IngestConfig()
        self.frame_queue = DropOldestQueue(self.config.frame_queue_capacity)
        self.aligner = Aligner(self.config)
        self._sensor_lock = threading.Lock()
        self._listener = socket.create_server(resolve_bind_address(bind))
        self.address = self._listener.getsockname()
        self._threads = []
        self._conns = []
        self._stop = threading.Event()
        self._pressure_since = None
        self.arrival_ns = {}  # frame seq -> wall-clock arrival
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self._conns.append(conn)
            thread = threading.Thread(target=self._recv_loop, args=(conn,),
                                      daemon=True)
            thread.start()
            self._threads.append(thread)

    def _recv_loop(self, conn):
        stream = IngestStream(conn)
        try:
            for sample in stream:
                if isinstance(sample, ControlMessage):
                    continue
                if sample.modality == Modality.FRAME:
                    self.arrival_ns[sample.payload.seq] = time.monotonic_ns()
                    self.frame_queue.put(sample)
                    self._check_pressure(conn)
                else:
                    with self._sensor_lock:
                        self.aligner.offer(sample)
        except StreamEndedError:
            pass
        finally:
            conn.close()

    def _check_pressure(self, conn):
        if self.frame_queue.occupancy() > 0.8:
            now = time.monotonic()
            if self._pressure_since is None:
                self._pressure_since = now
            elif now - self._pressure_since > 1.0:
                try:
                    conn.sendall(encode_control(time.monotonic_ns(),
                                                {"resolution": 0.5}))
                except OSError:
                    pass
                self._pressure_since = None
        else:
            self._pressure_since = None

    def next_record(self, timeout=None) -> SyncedRecord | None:
        """Blocking: align the next frame against the sensor queues."""
        frame = self.frame_queue.get(timeout=timeout)
        if frame is None:
            return None
        deadline = time.monotonic() + 1.5 * self.config.window_ns / 1e9
        while time.monotonic() < deadline:
            with self._sensor_lock:
                gps_ready = (not self.aligner.gps_queue
                             or self.aligner.gps_queue[-1].timestamp_ns
                             >= frame.timestamp_ns)
                imu_ready = (not self.aligner.imu_queue
                             or self.aligner.imu_queue[-1].timestamp_ns
                             >= frame.timestamp_ns)
            if gps_ready and imu_ready:
                break
            time.sleep(0.001)
        with self._sensor_lock:
            return self.aligner.align_frame(frame)

    def close(self):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        for conn in self._conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        for thread in self._threads:
            thread.join(timeout=1.0)
