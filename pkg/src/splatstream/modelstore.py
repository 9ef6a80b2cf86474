"""Binary persistence for splat clouds, plus interop with the common
point-cloud PLY layout used by public gaussian-splatting tools.

SPLM format (all integers and floats little-endian):

    header:
        magic           4 bytes  b"SPLM"
        version         u16      currently 1
        gaussian_count  u64
        sh_degree       u8       0..3
        revision        u64
        grid_cell_size  f32      world units (0 when no grid)
        grid_cell_count u32      number of non-empty grid cells
        offsets         7 x u64  absolute file offsets of the arrays below
    arrays, contiguous, in offset order:
        positions       f32 x 3N
        rotations       f32 x 4N   (w, x, y, z)
        log_scales      f32 x 3N
        opacity_logits  f32 x N
        sh              f32 x 3(d+1)^2 N   (per gaussian: k coefficients x rgb)
        ids             u64 x N
        grid            per cell: cell_index u32, member_count u32,
                        member ordinals u32 x member_count

The grid maps each gaussian (by ordinal, i.e. its index in the arrays) to
the cell of its mean in a uniform grid anchored at the component-wise
minimum of all positions. Cell indices linearize x + dims_x*(y + dims_y*z).
Writers emit cells sorted by index.

Saving is atomic: data goes to a temp file in the destination directory,
is fsynced, then renamed over the target.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .core import SplatCloud, sh_coeff_count
from .errors import ModelFormatError, ModelValidationError, PlySchemaError

MAGIC = b"SPLM"
VERSION = 1
_HEADER = struct.Struct("<4sHQBQfI7Q")


def save(cloud: SplatCloud, path) -> int:
    """Write a cloud to `path`; returns the byte count written."""
    n = len(cloud)
    k = sh_coeff_count(cloud.sh_degree)
    if cloud.tiling is None:
        cloud.rebuild_tiling()
    cell_size = cloud.grid_cell_size if n else 0.0

    id_to_ordinal = {int(g): i for i, g in enumerate(cloud.ids)}
    grid_blob = bytearray()
    cells = sorted(cloud.tiling.items()) if cloud.tiling else []
    for cell, gids in cells:
        ordinals = np.array([id_to_ordinal[int(g)] for g in gids],
                            dtype="<u4")
        grid_blob += struct.pack("<II", cell, len(ordinals))
        grid_blob += ordinals.tobytes()

    arrays = [
        cloud.positions.astype("<f4").tobytes(),
        cloud.rotations.astype("<f4").tobytes(),
        cloud.log_scales.astype("<f4").tobytes(),
        cloud.opacity_logits.astype("<f4").tobytes(),
        cloud.sh.astype("<f4").tobytes(),
        cloud.ids.astype("<u8").tobytes(),
        bytes(grid_blob),
    ]
    offsets = []
    cursor = _HEADER.size
    for blob in arrays:
        offsets.append(cursor)
        cursor += len(blob)

    header = _HEADER.pack(MAGIC, VERSION, n, cloud.sh_degree, cloud.revision,
                          cell_size, len(cells), *offsets)

    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".splm-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            for blob in arrays:
                f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.rename(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    _ = k  # degree consistency is implied by the sh array length
    return cursor


def load(path) -> SplatCloud:
    """Read a cloud saved by `save`, validating structure before use."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"file too short for header: {len(data)} bytes")
    magic, version, count, degree, revision, cell_size, cell_count, *offsets = \
        _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    if degree > 3:
        raise ModelFormatError(f"sh_degree {degree} out of range")

    k = sh_coeff_count(degree)
    expected = [count * 3 * 4, count * 4 * 4, count * 3 * 4, count * 4,
                count * k * 3 * 4, count * 8]
    bounds = offsets + [len(data)]
    if offsets[0] != _HEADER.size:
        raise ModelFormatError("first array offset must follow the header")
    for i in range(7):
        if bounds[i + 1] < bounds[i]:
            raise ModelFormatError("array offsets must be non-decreasing")
        if bounds[i + 1] > len(data):
            raise ModelFormatError(
                f"offset {bounds[i + 1]} beyond file length {len(data)}")
        if i < 6 and bounds[i + 1] - bounds[i] != expected[i]:
            raise ModelFormatError(
                f"array {i} spans {bounds[i + 1] - bounds[i]} bytes, "
                f"expected {expected[i]}")

    def arr(i, dtype, shape):
        raw = data[bounds[i]:bounds[i + 1]]
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    positions = arr(0, "<f4", (count, 3))
    rotations = arr(1, "<f4", (count, 4))
    log_scales = arr(2, "<f4", (count, 3))
    opacity_logits = arr(3, "<f4", (count,))
    sh = arr(4, "<f4", (count, k, 3))
    ids = arr(5, "<u8", (count,))

    bad = []
    for name, a in (("positions", positions), ("rotations", rotations),
                    ("log_scales", log_scales),
                    ("opacity_logits", opacity_logits), ("sh", sh)):
        nan_idx = np.flatnonzero(~np.isfinite(a.reshape(count, -1)).all(axis=1)) \
            if count else []
        for i in nan_idx:
            bad.append((name, int(i)))
    if bad:
        raise ModelValidationError(
            f"non-finite parameters at {bad[:20]}", indices=bad)

    tiling: dict[int, np.ndarray] = {}
    cursor = bounds[6]
    end = len(data)
    seen = 0
    for _ in range(cell_count):
        if cursor + 8 > end:
            raise ModelFormatError("grid truncated mid-cell-header")
        cell, members = struct.unpack_from("<II", data, cursor)
        cursor += 8
        if cursor + 4 * members > end:
            raise ModelFormatError("grid truncated mid-member-list")
        ordinals = np.frombuffer(data, dtype="<u4", count=members,
                                 offset=cursor)
        cursor += 4 * members
        if members and ordinals.max() >= count:
            raise ModelFormatError(
                f"grid ordinal {ordinals.max()} >= gaussian count {count}")
        tiling[cell] = ids[ordinals].copy()
        seen += members
    if cursor != end:
        raise ModelFormatError(f"{end - cursor} trailing bytes after grid")
    if seen != count:
        raise ModelFormatError(
            f"grid covers {seen} gaussians, cloud has {count}")

    cloud = SplatCloud.from_arrays(positions, rotations, log_scales, sh,
                                   opacity_logits, ids=ids, sh_degree=degree,
                                   revision=revision)
    cloud.grid_cell_size = cell_size
    cloud.tiling = tiling
    return cloud


# -- gaussian-splat PLY interop ----------------------------------------------

def _ply_property_names(k: int) -> list[str]:
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def export_ply(cloud: SplatCloud, path):
    """Write the widely used splat PLY layout (binary little-endian).

    f_dc holds the SH DC term per channel; f_rest is channel-major
    (all red rest coefficients, then green, then blue)."""
    n = len(cloud)
    k = sh_coeff_count(cloud.sh_degree)
    names = _ply_property_names(k)
    cols = np.zeros((n, len(names)), dtype="<f4")
    cols[:, 0:3] = cloud.positions
    cols[:, 6:9] = cloud.sh[:, 0, :]
    rest = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    cols[:, 9:9 + 3 * (k - 1)] = rest
    base = 9 + 3 * (k - 1)
    cols[:, base] = cloud.opacity_logits
    cols[:, base + 1:base + 4] = cloud.log_scales
    cols[:, base + 4:base + 8] = cloud.rotations

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header += ["end_header"]
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ply-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(cols.tobytes())
            f.flush()
            os.fsync(f.fileno())
        os.rename(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def import_ply(path) -> SplatCloud:
    """Read a splat PLY; gaussians get fresh ids 0..n-1."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ModelFormatError("not a PLY file")
    header_lines = data[:end].decode("ascii", "replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    count = None
    names = []
    fmt = None
    for line in header_lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property" and count is not None:
            if parts[1] != "float":
                raise ModelFormatError(
                    f"unsupported property type {parts[1]} for {parts[-1]}")
            names.append(parts[2])
    if fmt != "binary_little_endian":
        raise ModelFormatError(f"unsupported PLY format {fmt}")
    if count is None:
        raise ModelFormatError("missing vertex element")

    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
                "rot_3"]
    for prop in required:
        if prop not in names:
            raise PlySchemaError(prop)

    rest_names = sorted((nm for nm in names if nm.startswith("f_rest_")),
                        key=lambda nm: int(nm.split("_")[-1]))
    n_rest = len(rest_names)
    if n_rest % 3 != 0:
        raise ModelFormatError(f"f_rest count {n_rest} not divisible by 3")
    k = n_rest // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if sh_coeff_count(degree) != k:
        raise ModelFormatError(f"{n_rest} f_rest properties do not form a "
                               "complete SH degree")

    if len(body) < count * len(names) * 4:
        raise ModelFormatError("PLY body shorter than declared vertex data")
    table = np.frombuffer(body, dtype="<f4",
                          count=count * len(names)).reshape(count, len(names))
    col = {name: table[:, i] for i, name in enumerate(names)}

    sh = np.zeros((count, k, 3), dtype=np.float32)
    sh[:, 0, 0] = col["f_dc_0"]
    sh[:, 0, 1] = col["f_dc_1"]
    sh[:, 0, 2] = col["f_dc_2"]
    if k > 1:
        rest = np.stack([col[nm] for nm in rest_names], axis=1)
        sh[:, 1:, :] = rest.reshape(count, 3, k - 1).transpose(0, 2, 1)

    return SplatCloud.from_arrays(
        positions=np.stack([col["x"], col["y"], col["z"]], axis=1),
        rotations=np.stack([col[f"rot_{i}"] for i in range(4)], axis=1),
        log_scales=np.stack([col[f"scale_{i}"] for i in range(3)], axis=1),
        sh=sh,
        opacity_logits=col["opacity"],
        sh_degree=degree,
    )


# -- array-block encoding shared with the delivery protocol -------------------

def pack_gaussian_block(cloud: SplatCloud, ordinals) -> bytes:
    """Serialize the selected gaussians as contiguous SPLM-order arrays."""
    sel = np.asarray(ordinals, dtype=np.int64)
    return b"".join([
        cloud.positions[sel].astype("<f4").tobytes(),
        cloud.rotations[sel].astype("<f4").tobytes(),
        cloud.log_scales[sel].astype("<f4").tobytes(),
        cloud.opacity_logits[sel].astype("<f4").tobytes(),
        cloud.sh[sel].astype("<f4").tobytes(),
        cloud.ids[sel].astype("<u8").tobytes(),
    ])


def gaussian_block_size(n: int, sh_degree: int) -> int:
    k = sh_coeff_count(sh_degree)
    return n * (3 + 4 + 3 + 1 + 3 * k) * 4 + n * 8


def unpack_gaussian_block(data: bytes, n: int, sh_degree: int, offset=0):
    """Inverse of pack_gaussian_block; returns a dict of arrays."""
    k = sh_coeff_count(sh_degree)
    need = gaussian_block_size(n, sh_degree)
    if len(data) - offset < need:
        raise ModelFormatError(
            f"gaussian block needs {need} bytes, got {len(data) - offset}")
    out = {}
    cursor = offset
    for name, dt, width in (("positions", "<f4", 3), ("rotations", "<f4", 4),
                            ("log_scales", "<f4", 3),
                            ("opacity_logits", "<f4", 1), ("sh", "<f4", 3 * k)):
        nbytes = n * width * 4
        arr = np.frombuffer(data, dtype=dt, count=n * width, offset=cursor)
        cursor += nbytes
        if name == "sh":
            out[name] = arr.reshape(n, k, 3).copy()
        elif width == 1:
            out[name] = arr.copy()
        else:
            out[name] = arr.reshape(n, width).copy()
    out["ids"] = np.frombuffer(data, dtype="<u8", count=n, offset=cursor).copy()
    return out, cursor + n * 8
