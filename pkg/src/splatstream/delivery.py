"""Live model delivery over WebSocket (RFC 6455), subprotocol
"splatstream.v1".

Clients send compact text control frames:

    cmd=subscribe mode=<replace|merge> roi=<x0,y0,z0,x1,y1,z1|none> rev=<u64>
    cmd=ack rev=<u64>
    cmd=resync rev=<u64>

The server pushes binary update messages (all integers little-endian):

    magic "SPUP" | version u8 = 1 | kind u8 (0 snapshot, 1 delta) |
    sh_degree u8 | roi_applied u8 | revision_from u64 | revision_to u64 |
    publish_ts_ns u64 | n_added u32 | n_modified u32 | n_removed u32 |
    added block | modified block | removed ids (u64 x n_removed)

Gaussian record blocks reuse the model store's array encoding (positions,
rotations, log_scales, opacity_logits, sh, ids — contiguous arrays).

Per client, the server keeps the content the client holds after everything
sent so far. Merge-mode subscribers receive deltas computed against their
last acknowledged state, so revision_from always equals the client's last
acked revision; while an update is in flight, newer snapshots coalesce into
a single pending entry (bounded queue, latest wins) and are diffed once the
ack arrives. Replace-mode subscribers always receive self-contained
snapshots. An ROI (world box resolved to the model grid's cells) filters
every update; a subscription change or resync request yields a fresh
ROI-scoped snapshot.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .core import SplatCloud, sh_coeff_count
from .errors import ModelFormatError, ProtocolError, ResyncRequiredError
from .modelstore import pack_gaussian_block, unpack_gaussian_block

SUBPROTOCOL = "splatstream.v1"
UPDATE_MAGIC = b"SPUP"
UPDATE_VERSION = 1
_UPDATE_HEADER = struct.Struct("<4sBBBBQQQIII")
QUEUE_DEPTH = 4

KIND_SNAPSHOT = 0
KIND_DELTA = 1


@dataclass
class ModelUpdate:
    kind: int                    # KIND_SNAPSHOT | KIND_DELTA
    revision_from: int
    revision_to: int
    sh_degree: int
    added: dict                  # arrays: positions, ..., ids
    modified: dict
    removed: np.ndarray          # ids (u64)
    roi_applied: bool = False
    publish_ts_ns: int = 0

    def __post_init__(self):
        if self.kind == KIND_SNAPSHOT:
            if len(self.removed):
                raise ProtocolError("snapshot must not remove ids")
            if self.revision_from != 0:
                raise ProtocolError("snapshot revision_from must be 0")
        if self.revision_to <= self.revision_from:
            raise ProtocolError("revision_to must exceed revision_from")
        sets = [set(self.added["ids"].tolist()),
                set(self.modified["ids"].tolist()),
                set(np.asarray(self.removed).tolist())]
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise ProtocolError("added/modified/removed ids must be disjoint")


def _empty_block(sh_degree: int) -> dict:
    k = sh_coeff_count(sh_degree)
    return {"positions": np.zeros((0, 3), "<f4"),
            "rotations": np.zeros((0, 4), "<f4"),
            "log_scales": np.zeros((0, 3), "<f4"),
            "opacity_logits": np.zeros(0, "<f4"),
            "sh": np.zeros((0, k, 3), "<f4"),
            "ids": np.zeros(0, "<u8")}


def encode_update(update: ModelUpdate) -> bytes:
    def block_bytes(block):
        return b"".join([
            np.ascontiguousarray(block["positions"], "<f4").tobytes(),
            np.ascontiguousarray(block["rotations"], "<f4").tobytes(),
            np.ascontiguousarray(block["log_scales"], "<f4").tobytes(),
            np.ascontiguousarray(block["opacity_logits"], "<f4").tobytes(),
            np.ascontiguousarray(block["sh"], "<f4").tobytes(),
            np.ascontiguousarray(block["ids"], "<u8").tobytes(),
        ])

    head = _UPDATE_HEADER.pack(
        UPDATE_MAGIC, UPDATE_VERSION, update.kind, update.sh_degree,
        1 if update.roi_applied else 0, update.revision_from,
        update.revision_to, update.publish_ts_ns,
        len(update.added["ids"]), len(update.modified["ids"]),
        len(update.removed))
    return head + block_bytes(update.added) + block_bytes(update.modified) \
        + np.ascontiguousarray(update.removed, "<u8").tobytes()


def decode_update(data: bytes) -> ModelUpdate:
    if len(data) < _UPDATE_HEADER.size:
        raise ProtocolError("update message too short")
    (magic, version, kind, degree, roi_applied, rev_from, rev_to,
     publish_ts, n_added, n_modified, n_removed) = _UPDATE_HEADER.unpack_from(data)
    if magic != UPDATE_MAGIC or version != UPDATE_VERSION:
        raise ProtocolError("bad update magic/version")
    cursor = _UPDATE_HEADER.size
    try:
        added, cursor = unpack_gaussian_block(data, n_added, degree, cursor)
        modified, cursor = unpack_gaussian_block(data, n_modified, degree,
                                                 cursor)
    except ModelFormatError as e:
        raise ProtocolError(str(e)) from e
    need = n_removed * 8
    if len(data) - cursor < need:
        raise ProtocolError("update truncated in removed-id list")
    removed = np.frombuffer(data, dtype="<u8", count=n_removed,
                            offset=cursor).copy()
    if len(data) != cursor + need:
        raise ProtocolError("trailing bytes after update")
    return ModelUpdate(kind=kind, revision_from=rev_from, revision_to=rev_to,
                       sh_degree=degree, added=added, modified=modified,
                       removed=removed, roi_applied=bool(roi_applied),
                       publish_ts_ns=publish_ts)


# -- client-side model state ---------------------------------------------------

def record_of(cloud: SplatCloud, ordinal: int) -> bytes:
    """Canonical byte encoding of one gaussian's parameters."""
    return pack_gaussian_block(cloud, [ordinal])


def _slice_records(blobs: dict, ids, k: int):
    """Per-gaussian record bytes from whole-array byte strings (fast path:
    byte slicing only, no numpy work per record)."""
    pos_b, rot_b, ls_b, op_b, sh_b, id_b = blobs["bytes"]
    shk = 12 * k
    out = []
    for i, gid in enumerate(ids):
        out.append((int(gid),
                    pos_b[12 * i:12 * i + 12] + rot_b[16 * i:16 * i + 16]
                    + ls_b[12 * i:12 * i + 12] + op_b[4 * i:4 * i + 4]
                    + sh_b[shk * i:shk * i + shk] + id_b[8 * i:8 * i + 8]))
    return out


def _cloud_byte_arrays(cloud: SplatCloud):
    return {"bytes": (
        np.ascontiguousarray(cloud.positions, "<f4").tobytes(),
        np.ascontiguousarray(cloud.rotations, "<f4").tobytes(),
        np.ascontiguousarray(cloud.log_scales, "<f4").tobytes(),
        np.ascontiguousarray(cloud.opacity_logits, "<f4").tobytes(),
        np.ascontiguousarray(cloud.sh, "<f4").tobytes(),
        np.ascontiguousarray(cloud.ids, "<u8").tobytes(),
    )}


def roi_id_set(cloud: SplatCloud, roi_cells) -> set:
    if cloud.tiling is None:
        cloud.rebuild_tiling()
    wanted = set()
    for cell in roi_cells:
        wanted.update(int(g) for g in cloud.tiling.get(cell, ()))
    return wanted


def snapshot_content(cloud: SplatCloud, roi_cells=None) -> dict:
    """id -> parameter bytes for every gaussian (optionally ROI-filtered)."""
    wanted = roi_id_set(cloud, roi_cells) if roi_cells is not None else None
    k = sh_coeff_count(cloud.sh_degree)
    records = _slice_records(_cloud_byte_arrays(cloud), cloud.ids.tolist(), k)
    if wanted is None:
        return dict(records)
    return {gid: blob for gid, blob in records if gid in wanted}


def resolve_roi_cells(cloud: SplatCloud, box) -> set:
    """Grid cells whose extent intersects the world-space box."""
    if cloud.tiling is None:
        cloud.rebuild_tiling()
    cell = cloud.grid_cell_size
    if cell <= 0 or not cloud.tiling:
        return set()
    origin, dims = cloud.grid_shape(cell)
    x0, y0, z0, x1, y1, z1 = box
    lo = np.floor((np.array([x0, y0, z0]) - origin) / cell).astype(int)
    hi = np.floor((np.array([x1, y1, z1]) - origin) / cell).astype(int)
    lo = np.clip(lo, 0, dims - 1)
    hi = np.clip(hi, 0, dims - 1)
    cells = set()
    for ix in range(lo[0], hi[0] + 1):
        for iy in range(lo[1], hi[1] + 1):
            for iz in range(lo[2], hi[2] + 1):
                cells.add(int(ix + dims[0] * (iy + dims[1] * iz)))
    return cells & set(cloud.tiling.keys())


def _record_dtype(k: int) -> np.dtype:
    return np.dtype([("pos", "<f4", (3,)), ("rot", "<f4", (4,)),
                     ("ls", "<f4", (3,)), ("op", "<f4"),
                     ("sh", "<f4", (k, 3)), ("id", "<u8")])


def _block_from_records(records: list, sh_degree: int) -> dict:
    if not records:
        return _empty_block(sh_degree)
    k = sh_coeff_count(sh_degree)
    arr = np.frombuffer(b"".join(records), dtype=_record_dtype(k))
    return {"positions": arr["pos"].copy(), "rotations": arr["rot"].copy(),
            "log_scales": arr["ls"].copy(),
            "opacity_logits": arr["op"].copy(), "sh": arr["sh"].copy(),
            "ids": arr["id"].copy()}


def diff_content(base: dict, target: dict, revision_from: int,
                 revision_to: int, sh_degree: int,
                 roi_applied=False) -> ModelUpdate | None:
    """Delta turning `base` (id -> record bytes) into `target`; None when
    they are identical. Modification detection is exact byte inequality."""
    added, modified = [], []
    for gid, blob in target.items():
        old = base.get(gid)
        if old is None:
            added.append(blob)
        elif old != blob:
            modified.append(blob)
    removed = np.array(sorted(set(base) - set(target)), dtype="<u8")
    if not added and not modified and not len(removed):
        return None
    return ModelUpdate(
        kind=KIND_DELTA, revision_from=revision_from, revision_to=revision_to,
        sh_degree=sh_degree, added=_block_from_records(added, sh_degree),
        modified=_block_from_records(modified, sh_degree), removed=removed,
        roi_applied=roi_applied)


def snapshot_update(content: dict, revision_to: int, sh_degree: int,
                    roi_applied=False) -> ModelUpdate:
    return ModelUpdate(
        kind=KIND_SNAPSHOT, revision_from=0, revision_to=revision_to,
        sh_degree=sh_degree,
        added=_block_from_records([content[g] for g in sorted(content)],
                                  sh_degree),
        modified=_empty_block(sh_degree), removed=np.zeros(0, "<u8"),
        roi_applied=roi_applied)


def snapshot_update_from_cloud(cloud: SplatCloud, roi_cells=None,
                               roi_applied=False) -> ModelUpdate:
    """Snapshot built by array indexing; equivalent to snapshot_update over
    snapshot_content but without the per-record detour."""
    if roi_cells is None:
        ordinals = np.argsort(cloud.ids)
    else:
        wanted = roi_id_set(cloud, roi_cells)
        mask = np.fromiter((int(g) in wanted for g in cloud.ids), bool,
                           len(cloud))
        sel = np.flatnonzero(mask)
        ordinals = sel[np.argsort(cloud.ids[sel])] if len(sel) else sel
    block = {"positions": cloud.positions[ordinals],
             "rotations": cloud.rotations[ordinals],
             "log_scales": cloud.log_scales[ordinals],
             "opacity_logits": cloud.opacity_logits[ordinals],
             "sh": cloud.sh[ordinals],
             "ids": cloud.ids[ordinals]}
    return ModelUpdate(
        kind=KIND_SNAPSHOT, revision_from=0, revision_to=cloud.revision,
        sh_degree=cloud.sh_degree, added=block,
        modified=_empty_block(cloud.sh_degree), removed=np.zeros(0, "<u8"),
        roi_applied=roi_applied)


def apply_update(client_model: dict, update: ModelUpdate,
                 client_revision: int) -> int:
    """Mutate a client model (id -> record bytes); returns the new revision."""
    def records(block):
        n = len(block["ids"])
        if n == 0:
            return []
        k = block["sh"].shape[1]
        arr = np.empty(n, dtype=_record_dtype(k))
        arr["pos"] = block["positions"]
        arr["rot"] = block["rotations"]
        arr["ls"] = block["log_scales"]
        arr["op"] = block["opacity_logits"]
        arr["sh"] = block["sh"]
        arr["id"] = block["ids"]
        blob = arr.tobytes()
        size = arr.itemsize
        return [(int(block["ids"][i]), blob[i * size:(i + 1) * size])
                for i in range(n)]

    if update.kind == KIND_SNAPSHOT:
        client_model.clear()
        for gid, blob in records(update.added):
            client_model[gid] = blob
        return update.revision_to

    if client_revision != update.revision_from:
        raise ResyncRequiredError(client_revision, update.revision_from)
    for gid, blob in records(update.added):
        if gid in client_model:
            raise ProtocolError(f"added id {gid} already present")
        client_model[gid] = blob
    for gid, blob in records(update.modified):
        if gid not in client_model:
            raise ProtocolError(f"modified id {gid} unknown")
        client_model[gid] = blob
    for gid in np.asarray(update.removed).tolist():
        if gid not in client_model:
            raise ProtocolError(f"removed id {gid} unknown")
        del client_model[gid]
    return update.revision_to


# -- control frame grammar ------------------------------------------------------

def parse_control(text: str) -> dict:
    fields = {}
    for part in text.split():
        if "=" not in part:
            raise ProtocolError(f"bad control token: {part}")
        key, value = part.split("=", 1)
        fields[key] = value
    if "cmd" not in fields:
        raise ProtocolError("control frame missing cmd")
    if fields["cmd"] not in ("subscribe", "ack", "resync"):
        raise ProtocolError(f"unknown cmd {fields['cmd']}")
    return fields


def format_control(cmd: str, **fields) -> str:
    parts = [f"cmd={cmd}"]
    parts += [f"{k}={v}" for k, v in fields.items()]
    return " ".join(parts)


def parse_roi(value: str):
    if value in ("none", "", None):
        return None
    coords = [float(v) for v in value.split(",")]
    if len(coords) != 6:
        raise ProtocolError("roi needs 6 comma-separated coordinates")
    box = coords
    if box[0] >= box[3] or box[1] >= box[4] or box[2] >= box[5]:
        raise ProtocolError("roi box must have positive volume")
    return tuple(box)


@dataclass
class Subscription:
    mode: str = "replace"          # replace | merge
    roi_box: tuple | None = None
    last_acked_revision: int = 0


# -- server ----------------------------------------------------------------------

class _Session:
    def __init__(self, connection, server):
        self.connection = connection
        self.server = server
        self.subscription = None
        self.base_content: dict = {}
        self.in_flight: tuple | None = None  # (revision_to, content)
        self.pending = []                    # snapshots awaiting ack, newest last
        self.lock = threading.Lock()
        self.dead = False

    # all sends below assume self.lock is held

    def _send_with_target(self, update: ModelUpdate, content: dict):
        """Transmit and remember what the client will hold once it acks."""
        update.publish_ts_ns = time.time_ns()
        try:
            self.connection.send(encode_update(update))
        except Exception:
            self.dead = True
            return
        self.in_flight = (update.revision_to, content)

    def _roi_cells(self, snapshot: SplatCloud):
        if self.subscription.roi_box is None:
            return None
        return resolve_roi_cells(snapshot, self.subscription.roi_box)

    def _content_for(self, snapshot: SplatCloud) -> dict:
        return snapshot_content(snapshot, self._roi_cells(snapshot))

    def _send_snapshot_now(self, snapshot: SplatCloud):
        cells = self._roi_cells(snapshot)
        update = snapshot_update_from_cloud(
            snapshot, cells, roi_applied=self.subscription.roi_box is not None)
        # merge mode diffs future publishes against this state; replace
        # mode never looks at it
        content = snapshot_content(snapshot, cells) \
            if self.subscription.mode == "merge" else None
        self._send_with_target(update, content)

    def handle_subscribe(self, fields, snapshot):
        self.subscription = Subscription(
            mode=fields.get("mode", "replace"),
            roi_box=parse_roi(fields.get("roi", "none")),
            last_acked_revision=int(fields.get("rev", "0")))
        if self.subscription.mode not in ("replace", "merge"):
            raise ProtocolError(f"unknown mode {self.subscription.mode}")
        with self.lock:
            self.pending.clear()
            self.in_flight = None
            if snapshot is not None:
                self._send_snapshot_now(snapshot)

    def handle_ack(self, fields):
        rev = int(fields.get("rev", "0"))
        with self.lock:
            if self.in_flight is None or rev != self.in_flight[0]:
                # client acked something we did not send last: resync
                latest = self.server.latest_snapshot
                if latest is not None:
                    self.pending.clear()
                    self._send_snapshot_now(latest)
                return
            self.subscription.last_acked_revision = rev
            self.base_content = self.in_flight[1]
            self.in_flight = None
            if self.pending:
                snapshot = self.pending[-1]
                self.pending.clear()
                self.push(snapshot, locked=True)

    def handle_resync(self, snapshot):
        with self.lock:
            self.pending.clear()
            self.in_flight = None
            if snapshot is not None:
                self._send_snapshot_now(snapshot)

    def push(self, snapshot: SplatCloud, locked=False):
        if self.subscription is None or self.dead:
            return
        if not locked:
            self.lock.acquire()
        try:
            if self.in_flight is not None:
                self.pending.append(snapshot)
                if len(self.pending) > QUEUE_DEPTH:
                    del self.pending[0]  # coalesce: latest wins
                return
            roi = self.subscription.roi_box is not None
            if self.subscription.mode == "replace":
                update = snapshot_update_from_cloud(
                    snapshot, self._roi_cells(snapshot), roi_applied=roi)
                self._send_with_target(update, None)
                return
            content = self._content_for(snapshot)
            update = diff_content(self.base_content, content,
                                  self.subscription.last_acked_revision,
                                  snapshot.revision, snapshot.sh_degree,
                                  roi_applied=roi)
            if update is None:
                return  # content unchanged for this client: suppressed
            self._send_with_target(update, content)
        finally:
            if not locked:
                self.lock.release()


class DeliveryServer:
    """Fan-out hub: publish(cloud_snapshot) pushes updates to subscribers."""

    def __init__(self, bind=("127.0.0.1", 0)):
        from websockets.sync.server import serve

        self.sessions = []
        self._sessions_lock = threading.Lock()
        self.latest_snapshot = None
        self._server = serve(self._handler, bind[0], bind[1],
                             subprotocols=[SUBPROTOCOL])
        self.address = self._server.socket.getsockname()
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()

    def _handler(self, connection):
        session = _Session(connection, self)
        with self._sessions_lock:
            self.sessions.append(session)
        try:
            for message in connection:
                if isinstance(message, bytes):
                    continue  # clients do not send binary frames
                fields = parse_control(message)
                if fields["cmd"] == "subscribe":
                    session.handle_subscribe(fields, self.latest_snapshot)
                elif fields["cmd"] == "ack":
                    session.handle_ack(fields)
                elif fields["cmd"] == "resync":
                    session.handle_resync(self.latest_snapshot)
        except Exception:
            pass
        finally:
            session.dead = True
            with self._sessions_lock:
                if session in self.sessions:
                    self.sessions.remove(session)

    def publish(self, cloud_snapshot: SplatCloud):
        """Queue the snapshot to every live subscriber (dead ones pruned)."""
        if cloud_snapshot.tiling is None:
            cloud_snapshot.rebuild_tiling()
        self.latest_snapshot = cloud_snapshot
        with self._sessions_lock:
            sessions = list(self.sessions)
        for session in sessions:
            session.push(cloud_snapshot)
        with self._sessions_lock:
            self.sessions = [s for s in self.sessions if not s.dead]

    def close(self):
        self._server.shutdown()
        self._thread.join(timeout=2.0)


# -- client ----------------------------------------------------------------------

class DeliveryClient:
    """Headless subscriber: maintains a model dict and acks every update."""

    def __init__(self, address, mode="merge", roi=None, timeout=5.0):
        from websockets.sync.client import connect

        host, port = address
        self.connection = connect(f"ws://{host}:{port}",
                                  subprotocols=[SUBPROTOCOL],
                                  open_timeout=timeout)
        if self.connection.subprotocol != SUBPROTOCOL:
            self.connection.close()
            raise ProtocolError(
                f"server did not accept subprotocol {SUBPROTOCOL}")
        self.timeout = timeout
        self.mode = mode
        self.model: dict = {}
        self.revision = 0
        self.updates_received = 0
        self.latencies_ms = []
        self.subscribe(mode=mode, roi=roi)

    def subscribe(self, mode=None, roi=None):
        self.mode = mode or self.mode
        roi_text = "none" if roi is None else ",".join(repr(float(v))
                                                       for v in roi)
        self.connection.send(format_control("subscribe", mode=self.mode,
                                            roi=roi_text, rev=self.revision))

    def request_resync(self, claim_revision=None):
        rev = self.revision if claim_revision is None else claim_revision
        self.connection.send(format_control("resync", rev=rev))

    def send_ack(self, revision):
        self.connection.send(format_control("ack", rev=revision))

    def recv_update(self, timeout=None) -> ModelUpdate:
        data = self.connection.recv(timeout=timeout or self.timeout)
        if not isinstance(data, bytes):
            raise ProtocolError(f"unexpected text frame: {data!r}")
        update = decode_update(data)
        self.revision = apply_update(self.model, update, self.revision)
        self.updates_received += 1
        self.latencies_ms.append((time.time_ns() - update.publish_ts_ns) / 1e6)
        self.send_ack(self.revision)
        return update

    def drain(self, quiet_s=0.3):
        """Apply updates until the connection stays quiet for `quiet_s`."""
        from websockets.exceptions import ConnectionClosed

        applied = []
        while True:
            try:
                applied.append(self.recv_update(timeout=quiet_s))
            except (TimeoutError, ConnectionClosed):
                return applied

    def close(self):
        self.connection.close()


# -- conformance ------------------------------------------------------------------

CONFORMANCE_SCENARIOS = ("replace", "merge", "roi", "resync", "reconnect")


def conformance_client(address, scenario: str) -> dict:
    """Run one scripted protocol scenario against a live server.

    Returns {"scenario", "pass", "detail", "latency_ms"}. Assumes the server
    has published at least one snapshot.
    """
    result = {"scenario": scenario, "pass": False, "detail": "",
              "latency_ms": []}

    def fail(detail):
        result["detail"] = detail
        return result

    def ok(detail=""):
        result["pass"] = True
        result["detail"] = detail
        return result

    if scenario == "replace":
        client = DeliveryClient(address, mode="replace")
        try:
            first = client.recv_update()
            if first.kind != KIND_SNAPSHOT:
                return fail("expected an initial snapshot")
            extra = client.drain(quiet_s=0.3)
            result["latency_ms"] = client.latencies_ms
            if extra:
                return fail(f"static model produced {len(extra)} extra updates")
            return ok(f"1 snapshot, {len(client.model)} gaussians")
        finally:
            client.close()

    if scenario == "merge":
        client = DeliveryClient(address, mode="merge")
        try:
            first = client.recv_update()
            if first.kind != KIND_SNAPSHOT:
                return fail("expected an initial snapshot")
            updates = client.drain(quiet_s=0.5)
            revisions = [first.revision_to] + [u.revision_to for u in updates]
            result["latency_ms"] = client.latencies_ms
            if revisions != sorted(revisions) or len(set(revisions)) != len(revisions):
                return fail(f"revisions not strictly increasing: {revisions}")
            return ok(f"{len(updates)} deltas applied cleanly")
        finally:
            client.close()

    if scenario == "roi":
        probe = DeliveryClient(address, mode="replace")
        try:
            probe.recv_update()
            positions = []
            for blob in probe.model.values():
                arrays, _ = unpack_gaussian_block(blob, 1, _infer_degree(blob))
                positions.append(arrays["positions"][0])
            if not positions:
                return fail("server model is empty")
            positions = np.stack(positions)
            mid = np.median(positions, axis=0)
            lo = positions.min(axis=0) - 1e-3
            box = (lo[0], lo[1], lo[2], mid[0], mid[1], mid[2])
        finally:
            probe.close()

        client = DeliveryClient(address, mode="merge", roi=box)
        try:
            first = client.recv_update()
            if not first.roi_applied:
                return fail("roi subscription produced an unfiltered update")
            n_roi = len(client.model)
            client.subscribe(mode="merge", roi=None)
            fresh = client.recv_update()
            if fresh.kind != KIND_SNAPSHOT:
                return fail("roi change must produce a fresh snapshot")
            result["latency_ms"] = client.latencies_ms
            if len(client.model) < n_roi:
                return fail("unfiltered model smaller than roi model")
            return ok(f"roi {n_roi} -> full {len(client.model)}")
        finally:
            client.close()

    if scenario == "resync":
        client = DeliveryClient(address, mode="merge")
        try:
            client.recv_update()
            reference = dict(client.model)
            # lie about our revision; the server must answer with a snapshot
            client.model.clear()
            client.revision = 0
            client.request_resync(claim_revision=999_999)
            recovered = client.recv_update()
            result["latency_ms"] = client.latencies_ms
            if recovered.kind != KIND_SNAPSHOT:
                return fail("resync must be answered with a snapshot")
            if client.model != reference:
                return fail("recovered model differs from reference")
            return ok("recovered after claiming a bogus revision")
        finally:
            client.close()

    if scenario == "reconnect":
        client = DeliveryClient(address, mode="merge")
        try:
            client.recv_update()
            held = dict(client.model)
        finally:
            client.close()
        client = DeliveryClient(address, mode="merge")
        try:
            client.recv_update()
            result["latency_ms"] = client.latencies_ms
            if client.model != held:
                return fail("model differs after reconnect")
            return ok("fresh subscription after reconnect")
        finally:
            client.close()

    return fail(f"unknown scenario {scenario}")


def _infer_degree(blob: bytes) -> int:
    # single-gaussian record: fixed part is (3+4+3+1)*4 + 8 id bytes
    rest = len(blob) - (11 * 4 + 8)
    k = rest // 12
    return int(round(np.sqrt(k))) - 1


def run_all_conformance(address) -> list:
    return [conformance_client(address, s) for s in CONFORMANCE_SCENARIOS]
