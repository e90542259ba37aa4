"""Binary serialization: rigged meshes and the asset container.

The container bundles everything the real-time renderer and the web viewer
need: field factors, extracted rigged mesh, skeleton, animation, and render
constants. The byte layout is the cross-component contract and is documented
offset-by-offset in schema.md. All payloads are little-endian; tensors are
f32 in channel-major, row-major order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional

import numpy as np
import torch

from .field import BoundingBox, FactorGroup, FactorizedField, FieldError, GridDims
from .skinning import Pose, Skeleton, SkinningError

MAGIC = b"DVHA"
VERSION = 1
MESH_MAGIC = b"MESH"

TAG_FIELD = int.from_bytes(b"FIEL", "little")
TAG_MESH = int.from_bytes(b"MESH", "little")
TAG_SKEL = int.from_bytes(b"SKEL", "little")
TAG_ANIM = int.from_bytes(b"ANIM", "little")
TAG_META = int.from_bytes(b"META", "little")
TAG_TEMPLATE = int.from_bytes(b"TMPL", "little")
TAG_OPTSTATE = int.from_bytes(b"OPTS", "little")

_KNOWN_TAGS = (TAG_FIELD, TAG_MESH, TAG_SKEL, TAG_ANIM, TAG_META,
               TAG_TEMPLATE, TAG_OPTSTATE)

MAX_SECTIONS = 64
MAX_SECTION_BYTES = 1 << 32


class AssetError(ValueError):
    pass


class BadMagic(AssetError):
    pass


class UnsupportedVersion(AssetError):
    pass


class TruncatedSection(AssetError):
    pass


class InvariantViolation(AssetError):
    pass


class _Reader:
    """Bounds-checked cursor over one section's bytes."""

    def __init__(self, data: memoryview, name: str):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedSection(
                f"{self.name}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, count, shape=None) -> np.ndarray:
        dt = np.dtype(dtype)
        arr = np.frombuffer(self.take(dt.itemsize * count), dtype=dt)
        return arr.reshape(shape) if shape is not None else arr


# -- rigged mesh -----------------------------------------------------------------

@dataclass
class RiggedMesh:
    """Triangle mesh with per-vertex top-4 skinning weights."""

    vertices: np.ndarray      # [N, 3] f32
    faces: np.ndarray         # [M, 3] u32
    bone_indices: np.ndarray  # [N, 4] u16
    bone_weights: np.ndarray  # [N, 4] f32

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype="<f4")
        self.faces = np.ascontiguousarray(self.faces, dtype="<u4")
        self.bone_indices = np.ascontiguousarray(self.bone_indices, dtype="<u2")
        self.bone_weights = np.ascontiguousarray(self.bone_weights, dtype="<f4")

    def validate(self):
        n = self.vertices.shape[0]
        if n == 0:
            raise InvariantViolation("mesh has no vertices")
        if self.faces.size and self.faces.max() >= n:
            raise InvariantViolation("face index out of range")
        if (self.bone_weights < -1e-6).any():
            raise InvariantViolation("negative skinning weight")
        sums = self.bone_weights.astype(np.float64).sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise InvariantViolation("skinning weight row does not sum to 1")


def mesh_to_bytes(mesh: RiggedMesh) -> bytes:
    mesh.validate()
    n = mesh.vertices.shape[0]
    m = mesh.faces.shape[0]
    parts = [MESH_MAGIC, struct.pack("<II", n, m),
             mesh.vertices.tobytes(), mesh.faces.tobytes()]
    rec = bytearray()
    for i in range(n):
        rec += struct.pack("<I", i)
        for k in range(4):
            rec += struct.pack("<Hf", int(mesh.bone_indices[i, k]),
                               float(mesh.bone_weights[i, k]))
    parts.append(bytes(rec))
    return b"".join(parts)


def mesh_from_bytes(data, name="mesh") -> RiggedMesh:
    r = _Reader(memoryview(data), name)
    if bytes(r.take(4)) != MESH_MAGIC:
        raise BadMagic(f"{name}: bad mesh magic")
    n, m = r.unpack("II")
    if n == 0 or n > (1 << 26) or m > (1 << 27):
        raise InvariantViolation(f"{name}: implausible mesh counts n={n} m={m}")
    verts = r.array("<f4", n * 3, (n, 3))
    faces = r.array("<u4", m * 3, (m, 3))
    idx = np.zeros((n, 4), dtype="<u2")
    wts = np.zeros((n, 4), dtype="<f4")
    for i in range(n):
        (vi,) = r.unpack("I")
        if vi >= n:
            raise InvariantViolation(f"{name}: weight record vertex {vi} out of range")
        for k in range(4):
            b, w = r.unpack("Hf")
            idx[vi, k] = b
            wts[vi, k] = w
    mesh = RiggedMesh(verts.copy(), faces.copy(), idx, wts)
    mesh.validate()
    if not np.isfinite(mesh.vertices).all():
        raise InvariantViolation(f"{name}: non-finite vertex")
    return mesh


def write_mesh(path, mesh: RiggedMesh):
    with open(path, "wb") as f:
        f.write(mesh_to_bytes(mesh))


def read_mesh(path) -> RiggedMesh:
    with open(path, "rb") as f:
        return mesh_from_bytes(f.read(), name=str(path))


def write_obj(path, vertices, faces):
    """Plain ASCII OBJ (positions + faces) for inspection."""
    with open(path, "w") as f:
        for v in np.asarray(vertices):
            f.write(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g}\n")
        for face in np.asarray(faces):
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")


# -- container --------------------------------------------------------------------

@dataclass
class AssetContainer:
    field: FactorizedField
    skeleton: Skeleton
    animation: List[Pose]
    tau: float
    mesh: Optional[RiggedMesh] = None
    template: Optional[RiggedMesh] = None
    meta: Dict = dc_field(default_factory=dict)
    opt_state: Optional[bytes] = None


def _group_to_bytes(group: FactorGroup) -> bytes:
    out = []
    for _, t in group.named_tensors():
        out.append(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())
    return b"".join(out)


def _field_to_bytes(field: FactorizedField, tau: float) -> bytes:
    head = struct.pack("<III", field.dims.d, field.dims.h, field.dims.w)
    head += np.asarray(
        list(field.bbox.min.numpy()) + list(field.bbox.max.numpy()), dtype="<f8").tobytes()
    head += struct.pack("<ddII", field.gain, tau, field.r_sigma, field.r_c)
    body = _group_to_bytes(field.density)
    for g in field.color:
        body += _group_to_bytes(g)
    return head + body


def _group_shapes(rank: int, dims: GridDims):
    d, h, w = dims.d, dims.h, dims.w
    return [("plane_yx", (rank, h, w)), ("plane_yz", (rank, h, d)),
            ("plane_xz", (rank, w, d)), ("line_z", (rank, d)),
            ("line_x", (rank, w)), ("line_y", (rank, h))]


def _read_group(r: _Reader, rank: int, dims: GridDims, group: FactorGroup):
    for name, shape in _group_shapes(rank, dims):
        count = int(np.prod(shape)) if rank > 0 else 0
        arr = r.array("<f4", count, shape)
        if not np.isfinite(arr).all():
            raise InvariantViolation(f"{r.name}: non-finite factor entries in {name}")
        setattr(group, name, torch.from_numpy(arr.astype(np.float32).reshape(shape)))


def _field_from_bytes(data, tag_name="FIELD"):
    r = _Reader(memoryview(data), tag_name)
    d, h, w = r.unpack("III")
    try:
        dims = GridDims(int(d), int(h), int(w))
    except FieldError as e:
        raise InvariantViolation(f"{tag_name}: {e}")
    bb = r.array("<f8", 6)
    if not np.isfinite(bb).all() or not (bb[:3] < bb[3:]).all():
        raise InvariantViolation(f"{tag_name}: invalid bbox")
    gain, tau, r_sigma, r_c = r.unpack("ddII")
    if not (0 < gain < 1e9) or r_sigma > 4096 or r_c > 4096:
        raise InvariantViolation(f"{tag_name}: implausible gain/ranks")
    if not np.isfinite(tau) or tau < 0:
        raise InvariantViolation(f"{tag_name}: invalid tau {tau}")
    bbox = BoundingBox(torch.tensor(bb[:3], dtype=torch.float64),
                       torch.tensor(bb[3:], dtype=torch.float64))
    field = FactorizedField(dims, bbox, int(r_sigma), int(r_c), float(gain),
                            dtype=torch.float32)
    _read_group(r, int(r_sigma), dims, field.density)
    for g in field.color:
        _read_group(r, int(r_c), dims, g)
    if r.pos != len(r.data):
        raise InvariantViolation(f"{tag_name}: {len(r.data) - r.pos} trailing bytes")
    return field, float(tau)


def _skeleton_to_bytes(skeleton: Skeleton) -> bytes:
    b = skeleton.bone_count
    out = struct.pack("<I", b)
    out += np.ascontiguousarray(skeleton.parents, dtype="<i4").tobytes()
    out += np.ascontiguousarray(skeleton.offsets.numpy(), dtype="<f4").tobytes()
    aa = skeleton.rest_pose.axis_angle().numpy()
    out += np.ascontiguousarray(aa, dtype="<f4").tobytes()
    out += np.ascontiguousarray(skeleton.rest_pose.root_translation.numpy(), dtype="<f4").tobytes()
    return out


def _skeleton_from_bytes(data) -> Skeleton:
    r = _Reader(memoryview(data), "SKEL")
    (b,) = r.unpack("I")
    if not (1 <= b <= 1024):
        raise InvariantViolation(f"SKEL: implausible bone count {b}")
    parents = r.array("<i4", b).astype(np.int64)
    offsets = r.array("<f4", b * 3, (b, 3)).astype(np.float64)
    rest_aa = r.array("<f4", b * 3, (b, 3)).astype(np.float64)
    rest_root = r.array("<f4", 3).astype(np.float64)
    if r.pos != len(r.data):
        raise InvariantViolation("SKEL: trailing bytes")
    try:
        rest = Pose.from_axis_angle(torch.from_numpy(rest_aa.copy()),
                                    torch.from_numpy(rest_root.copy()))
        return Skeleton(parents, torch.from_numpy(offsets.copy()), rest)
    except SkinningError as e:
        raise InvariantViolation(f"SKEL: {e}")


def _anim_to_bytes(poses: List[Pose]) -> bytes:
    out = struct.pack("<I", len(poses))
    for p in poses:
        out += np.ascontiguousarray(p.axis_angle().detach().numpy(), dtype="<f4").tobytes()
        out += np.ascontiguousarray(p.root_translation.detach().numpy(), dtype="<f4").tobytes()
    return out


def _anim_from_bytes(data, bone_count: int) -> List[Pose]:
    r = _Reader(memoryview(data), "ANIM")
    (n,) = r.unpack("I")
    if n > (1 << 22):
        raise InvariantViolation(f"ANIM: implausible frame count {n}")
    poses = []
    for _ in range(n):
        aa = r.array("<f4", bone_count * 3, (bone_count, 3)).astype(np.float64)
        root = r.array("<f4", 3).astype(np.float64)
        poses.append(Pose.from_axis_angle(torch.from_numpy(aa.copy()),
                                          torch.from_numpy(root.copy())))
    if r.pos != len(r.data):
        raise InvariantViolation("ANIM: trailing bytes")
    return poses


def container_to_bytes(container: AssetContainer) -> bytes:
    """Canonical serialization: export of an imported container is byte-identical."""
    sections = [(TAG_FIELD, _field_to_bytes(container.field, container.tau)),
                (TAG_SKEL, _skeleton_to_bytes(container.skeleton)),
                (TAG_ANIM, _anim_to_bytes(container.animation))]
    if container.mesh is not None:
        sections.append((TAG_MESH, mesh_to_bytes(container.mesh)))
    if container.template is not None:
        sections.append((TAG_TEMPLATE, mesh_to_bytes(container.template)))
    meta = dict(container.meta)
    sections.append((TAG_META, json.dumps(meta, sort_keys=True).encode("utf-8")))
    if container.opt_state is not None:
        sections.append((TAG_OPTSTATE, container.opt_state))

    header = MAGIC + struct.pack("<IB", VERSION, 1)
    table_size = 4 + len(sections) * (4 + 8 + 8)
    offset = len(header) + table_size
    table = struct.pack("<I", len(sections))
    payload = b""
    for tag, body in sections:
        table += struct.pack("<IQQ", tag, offset, len(body))
        payload += body
        offset += len(body)
    return header + table + payload


def container_from_bytes(data: bytes) -> AssetContainer:
    """Parse and validate a container. Never reads past declared lengths and
    rejects malformed input with a position-annotated error."""
    if len(data) < 4 or bytes(data[:4]) != MAGIC:
        raise BadMagic("offset 0: expected DVHA magic")
    if len(data) < 9:
        raise TruncatedSection("offset 4: truncated header")
    version, endian = struct.unpack_from("<IB", data, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"offset 4: version {version} unsupported")
    if endian != 1:
        raise UnsupportedVersion(f"offset 8: endianness flag {endian} unsupported")
    if len(data) < 13:
        raise TruncatedSection("offset 9: truncated section count")
    (count,) = struct.unpack_from("<I", data, 9)
    if count > MAX_SECTIONS:
        raise InvariantViolation(f"offset 9: section count {count} exceeds {MAX_SECTIONS}")
    table_end = 13 + count * 20
    if len(data) < table_end:
        raise TruncatedSection(f"offset 13: section table needs {table_end} bytes")
    sections = {}
    order = []
    for i in range(count):
        tag, off, length = struct.unpack_from("<IQQ", data, 13 + i * 20)
        pos = 13 + i * 20
        if length > MAX_SECTION_BYTES:
            raise InvariantViolation(f"offset {pos}: section length {length} too large")
        if off + length > len(data) or off < table_end:
            raise TruncatedSection(
                f"offset {pos}: section [{off}, {off + length}) outside file of {len(data)} bytes")
        if tag in sections:
            raise InvariantViolation(f"offset {pos}: duplicate section tag {tag:#x}")
        sections[tag] = bytes(data[off:off + length])
        order.append(tag)

    if TAG_FIELD not in sections:
        raise InvariantViolation("missing FIELD section")
    if TAG_SKEL not in sections:
        raise InvariantViolation("missing SKEL section")
    field, tau = _field_from_bytes(sections[TAG_FIELD])
    skeleton = _skeleton_from_bytes(sections[TAG_SKEL])
    animation = _anim_from_bytes(sections.get(TAG_ANIM, struct.pack("<I", 0)),
                                 skeleton.bone_count)
    mesh = mesh_from_bytes(sections[TAG_MESH], "MESH") if TAG_MESH in sections else None
    template = (mesh_from_bytes(sections[TAG_TEMPLATE], "TMPL")
                if TAG_TEMPLATE in sections else None)
    meta = {}
    if TAG_META in sections:
        try:
            meta = json.loads(sections[TAG_META].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise InvariantViolation(f"META: invalid JSON ({e})")
        if not isinstance(meta, dict):
            raise InvariantViolation("META: expected a JSON object")
    return AssetContainer(field=field, skeleton=skeleton, animation=animation,
                          tau=tau, mesh=mesh, template=template, meta=meta,
                          opt_state=sections.get(TAG_OPTSTATE))


def export(container: AssetContainer, destination):
    data = container_to_bytes(container)
    with open(destination, "wb") as f:
        f.write(data)
    return data


def load(path) -> AssetContainer:
    with open(path, "rb") as f:
        return container_from_bytes(f.read())
