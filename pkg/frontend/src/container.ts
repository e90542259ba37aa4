/**
 * Asset container parser — the browser-side twin of the Python importer.
 *
 * The byte layout is the cross-component contract (see ../schema.md in the
 * repository root). Validation rules and the error taxonomy are kept
 * identical to the reference importer: every malformed input maps to one of
 * the AssetError subclasses below, annotated with the byte offset or section
 * tag, and parsing never reads past a declared length.
 */

export const MAGIC = 0x41485644; // "DVHA" little-endian
export const VERSION = 1;
export const MESH_MAGIC = 0x4853454d; // "MESH"

export const TAG_FIELD = fourcc("FIEL");
export const TAG_MESH = fourcc("MESH");
export const TAG_SKEL = fourcc("SKEL");
export const TAG_ANIM = fourcc("ANIM");
export const TAG_META = fourcc("META");
export const TAG_TEMPLATE = fourcc("TMPL");
export const TAG_OPTSTATE = fourcc("OPTS");

export const MAX_SECTIONS = 64;
export const MAX_SECTION_BYTES = 2 ** 32;

function fourcc(s: string): number {
  return (
    (s.charCodeAt(0) |
      (s.charCodeAt(1) << 8) |
      (s.charCodeAt(2) << 16) |
      (s.charCodeAt(3) << 24)) >>>
    0
  );
}

export class AssetError extends Error {
  override name = "AssetError";
}
export class BadMagic extends AssetError {
  override name = "BadMagic";
}
export class UnsupportedVersion extends AssetError {
  override name = "UnsupportedVersion";
}
export class TruncatedSection extends AssetError {
  override name = "TruncatedSection";
}
export class InvariantViolation extends AssetError {
  override name = "InvariantViolation";
}

/** Bounds-checked little-endian cursor over one section's bytes. */
class Reader {
  private view: DataView;
  pos = 0;

  constructor(
    private data: Uint8Array,
    private name: string,
  ) {
    this.view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  }

  get length(): number {
    return this.data.byteLength;
  }

  private need(n: number): void {
    if (n < 0 || this.pos + n > this.data.byteLength) {
      throw new TruncatedSection(
        `${this.name}: need ${n} bytes at offset ${this.pos}, ` +
          `have ${this.data.byteLength - this.pos}`,
      );
    }
  }

  u32(): number {
    this.need(4);
    const v = this.view.getUint32(this.pos, true);
    this.pos += 4;
    return v;
  }

  u16(): number {
    this.need(2);
    const v = this.view.getUint16(this.pos, true);
    this.pos += 2;
    return v;
  }

  f32(): number {
    this.need(4);
    const v = this.view.getFloat32(this.pos, true);
    this.pos += 4;
    return v;
  }

  f64(): number {
    this.need(8);
    const v = this.view.getFloat64(this.pos, true);
    this.pos += 8;
    return v;
  }

  bytes(n: number): Uint8Array {
    this.need(n);
    const out = this.data.subarray(this.pos, this.pos + n);
    this.pos += n;
    return out;
  }

  f32array(count: number): Float32Array {
    this.need(count * 4);
    const out = new Float32Array(count);
    for (let i = 0; i < count; i++) {
      out[i] = this.view.getFloat32(this.pos + 4 * i, true);
    }
    this.pos += count * 4;
    return out;
  }

  f64array(count: number): Float64Array {
    this.need(count * 8);
    const out = new Float64Array(count);
    for (let i = 0; i < count; i++) {
      out[i] = this.view.getFloat64(this.pos + 8 * i, true);
    }
    this.pos += count * 8;
    return out;
  }

  i32array(count: number): Int32Array {
    this.need(count * 4);
    const out = new Int32Array(count);
    for (let i = 0; i < count; i++) {
      out[i] = this.view.getInt32(this.pos + 4 * i, true);
    }
    this.pos += count * 4;
    return out;
  }

  u32array(count: number): Uint32Array {
    this.need(count * 4);
    const out = new Uint32Array(count);
    for (let i = 0; i < count; i++) {
      out[i] = this.view.getUint32(this.pos + 4 * i, true);
    }
    this.pos += count * 4;
    return out;
  }
}

// -- parsed structures --------------------------------------------------------

export interface GridDims {
  d: number;
  h: number;
  w: number;
}

/** One rank-R plane/line factor set, channel-major row-major f32. */
export interface FactorGroup {
  rank: number;
  planeYX: Float32Array; // [R, H, W]
  planeYZ: Float32Array; // [R, H, D]
  planeXZ: Float32Array; // [R, W, D]
  lineZ: Float32Array; // [R, D]
  lineX: Float32Array; // [R, W]
  lineY: Float32Array; // [R, H]
}

export interface FieldSection {
  dims: GridDims;
  bboxMin: [number, number, number];
  bboxMax: [number, number, number];
  gain: number;
  tau: number;
  rSigma: number;
  rC: number;
  density: FactorGroup;
  color: [FactorGroup, FactorGroup, FactorGroup];
}

export interface SkeletonSection {
  parents: Int32Array; // [B], parents[0] = -1
  offsets: Float32Array; // [B, 3]
  restAxisAngle: Float32Array; // [B, 3]
  restRoot: [number, number, number];
}

export interface PoseFrame {
  axisAngle: Float32Array; // [B, 3]
  root: [number, number, number];
}

export interface RiggedMesh {
  vertices: Float32Array; // [N, 3]
  faces: Uint32Array; // [M, 3]
  boneIndices: Uint16Array; // [N, 4]
  boneWeights: Float32Array; // [N, 4]
}

export interface AssetContainer {
  field: FieldSection;
  skeleton: SkeletonSection;
  animation: PoseFrame[];
  tau: number;
  mesh: RiggedMesh | null;
  template: RiggedMesh | null;
  meta: Record<string, unknown>;
  optState: Uint8Array | null;
}

// -- field section --------------------------------------------------------------

const GROUP_TENSOR_NAMES = [
  "planeYX",
  "planeYZ",
  "planeXZ",
  "lineZ",
  "lineX",
  "lineY",
] as const;

function groupShapes(rank: number, dims: GridDims): [string, number][] {
  const { d, h, w } = dims;
  return [
    ["planeYX", rank * h * w],
    ["planeYZ", rank * h * d],
    ["planeXZ", rank * w * d],
    ["lineZ", rank * d],
    ["lineX", rank * w],
    ["lineY", rank * h],
  ];
}

function readGroup(r: Reader, rank: number, dims: GridDims, tagName: string): FactorGroup {
  const out: Partial<FactorGroup> = { rank };
  for (const [name, count] of groupShapes(rank, dims)) {
    const arr = r.f32array(count);
    for (let i = 0; i < arr.length; i++) {
      if (!Number.isFinite(arr[i])) {
        throw new InvariantViolation(
          `${tagName}: non-finite factor entries in ${name}`,
        );
      }
    }
    (out as Record<string, unknown>)[name] = arr;
  }
  return out as FactorGroup;
}

const MAX_VOXELS = 1 << 28;

function fieldFromBytes(data: Uint8Array, tagName = "FIELD"): FieldSection {
  const r = new Reader(data, tagName);
  const d = r.u32();
  const h = r.u32();
  const w = r.u32();
  if (d < 2 || h < 2 || w < 2) {
    throw new InvariantViolation(
      `${tagName}: grid dims must be integers >= 2, got d=${d} h=${h} w=${w}`,
    );
  }
  if (d * h * w > MAX_VOXELS) {
    throw new InvariantViolation(`${tagName}: grid exceeds ${MAX_VOXELS} voxels`);
  }
  const dims: GridDims = { d, h, w };
  const bb = r.f64array(6);
  for (let i = 0; i < 6; i++) {
    if (!Number.isFinite(bb[i])) throw new InvariantViolation(`${tagName}: invalid bbox`);
  }
  if (!(bb[0] < bb[3] && bb[1] < bb[4] && bb[2] < bb[5])) {
    throw new InvariantViolation(`${tagName}: invalid bbox`);
  }
  const gain = r.f64();
  const tau = r.f64();
  const rSigma = r.u32();
  const rC = r.u32();
  if (!(gain > 0 && gain < 1e9) || rSigma > 4096 || rC > 4096) {
    throw new InvariantViolation(`${tagName}: implausible gain/ranks`);
  }
  if (!Number.isFinite(tau) || tau < 0) {
    throw new InvariantViolation(`${tagName}: invalid tau ${tau}`);
  }
  const density = readGroup(r, rSigma, dims, tagName);
  const color: FactorGroup[] = [];
  for (let c = 0; c < 3; c++) color.push(readGroup(r, rC, dims, tagName));
  if (r.pos !== r.length) {
    throw new InvariantViolation(`${tagName}: ${r.length - r.pos} trailing bytes`);
  }
  return {
    dims,
    bboxMin: [bb[0], bb[1], bb[2]],
    bboxMax: [bb[3], bb[4], bb[5]],
    gain,
    tau,
    rSigma,
    rC,
    density,
    color: color as [FactorGroup, FactorGroup, FactorGroup],
  };
}

// -- skeleton / animation ---------------------------------------------------------

function skeletonFromBytes(data: Uint8Array): SkeletonSection {
  const r = new Reader(data, "SKEL");
  const b = r.u32();
  if (b < 1 || b > 1024) {
    throw new InvariantViolation(`SKEL: implausible bone count ${b}`);
  }
  const parents = r.i32array(b);
  const offsets = r.f32array(b * 3);
  const restAxisAngle = r.f32array(b * 3);
  const rr = r.f32array(3);
  if (r.pos !== r.length) throw new InvariantViolation("SKEL: trailing bytes");
  if (parents[0] !== -1) {
    throw new InvariantViolation("SKEL: bone 0 must be the root (parent -1)");
  }
  for (let i = 1; i < b; i++) {
    if (!(parents[i] >= 0 && parents[i] < i)) {
      throw new InvariantViolation(
        "SKEL: parents must be topologically ordered (parent[b] < b)",
      );
    }
  }
  return { parents, offsets, restAxisAngle, restRoot: [rr[0], rr[1], rr[2]] };
}

function animFromBytes(data: Uint8Array, boneCount: number): PoseFrame[] {
  const r = new Reader(data, "ANIM");
  const n = r.u32();
  if (n > 1 << 22) {
    throw new InvariantViolation(`ANIM: implausible frame count ${n}`);
  }
  const poses: PoseFrame[] = [];
  for (let f = 0; f < n; f++) {
    const aa = r.f32array(boneCount * 3);
    const rr = r.f32array(3);
    poses.push({ axisAngle: aa, root: [rr[0], rr[1], rr[2]] });
  }
  if (r.pos !== r.length) throw new InvariantViolation("ANIM: trailing bytes");
  return poses;
}

// -- rigged mesh ------------------------------------------------------------------

export function meshFromBytes(data: Uint8Array, name = "mesh"): RiggedMesh {
  const r = new Reader(data, name);
  if (r.u32() !== MESH_MAGIC) {
    throw new BadMagic(`${name}: bad mesh magic`);
  }
  const n = r.u32();
  const m = r.u32();
  if (n === 0 || n > 1 << 26 || m > 1 << 27) {
    throw new InvariantViolation(`${name}: implausible mesh counts n=${n} m=${m}`);
  }
  const vertices = r.f32array(n * 3);
  const faces = r.u32array(m * 3);
  const boneIndices = new Uint16Array(n * 4);
  const boneWeights = new Float32Array(n * 4);
  for (let i = 0; i < n; i++) {
    const vi = r.u32();
    if (vi >= n) {
      throw new InvariantViolation(`${name}: weight record vertex ${vi} out of range`);
    }
    for (let k = 0; k < 4; k++) {
      boneIndices[vi * 4 + k] = r.u16();
      boneWeights[vi * 4 + k] = r.f32();
    }
  }
  for (let i = 0; i < faces.length; i++) {
    if (faces[i] >= n) throw new InvariantViolation(`${name}: face index out of range`);
  }
  for (let i = 0; i < n; i++) {
    let sum = 0;
    for (let k = 0; k < 4; k++) {
      const wv = boneWeights[i * 4 + k];
      if (wv < -1e-6) throw new InvariantViolation(`${name}: negative skinning weight`);
      sum += wv;
    }
    if (Math.abs(sum - 1.0) > 1e-4) {
      throw new InvariantViolation(`${name}: skinning weight row does not sum to 1`);
    }
  }
  for (let i = 0; i < vertices.length; i++) {
    if (!Number.isFinite(vertices[i])) {
      throw new InvariantViolation(`${name}: non-finite vertex`);
    }
  }
  return { vertices, faces, boneIndices, boneWeights };
}

// -- container --------------------------------------------------------------------

export function containerFromBytes(data: Uint8Array): AssetContainer {
  const view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  if (data.byteLength < 4 || view.getUint32(0, true) !== MAGIC) {
    throw new BadMagic("offset 0: expected DVHA magic");
  }
  if (data.byteLength < 9) {
    throw new TruncatedSection("offset 4: truncated header");
  }
  const version = view.getUint32(4, true);
  const endian = view.getUint8(8);
  if (version !== VERSION) {
    throw new UnsupportedVersion(`offset 4: version ${version} unsupported`);
  }
  if (endian !== 1) {
    throw new UnsupportedVersion(`offset 8: endianness flag ${endian} unsupported`);
  }
  if (data.byteLength < 13) {
    throw new TruncatedSection("offset 9: truncated section count");
  }
  const count = view.getUint32(9, true);
  if (count > MAX_SECTIONS) {
    throw new InvariantViolation(
      `offset 9: section count ${count} exceeds ${MAX_SECTIONS}`,
    );
  }
  const tableEnd = 13 + count * 20;
  if (data.byteLength < tableEnd) {
    throw new TruncatedSection(`offset 13: section table needs ${tableEnd} bytes`);
  }
  const sections = new Map<number, Uint8Array>();
  for (let i = 0; i < count; i++) {
    const pos = 13 + i * 20;
    const tag = view.getUint32(pos, true);
    const off = Number(view.getBigUint64(pos + 4, true));
    const length = Number(view.getBigUint64(pos + 12, true));
    if (length > MAX_SECTION_BYTES) {
      throw new InvariantViolation(`offset ${pos}: section length ${length} too large`);
    }
    if (off + length > data.byteLength || off < tableEnd) {
      throw new TruncatedSection(
        `offset ${pos}: section [${off}, ${off + length}) outside file of ` +
          `${data.byteLength} bytes`,
      );
    }
    if (sections.has(tag)) {
      throw new InvariantViolation(
        `offset ${pos}: duplicate section tag 0x${tag.toString(16)}`,
      );
    }
    sections.set(tag, data.subarray(off, off + length));
  }

  if (!sections.has(TAG_FIELD)) throw new InvariantViolation("missing FIELD section");
  if (!sections.has(TAG_SKEL)) throw new InvariantViolation("missing SKEL section");
  const field = fieldFromBytes(sections.get(TAG_FIELD)!);
  const skeleton = skeletonFromBytes(sections.get(TAG_SKEL)!);
  const animBytes = sections.get(TAG_ANIM) ?? new Uint8Array([0, 0, 0, 0]);
  const animation = animFromBytes(animBytes, skeleton.parents.length);
  const mesh = sections.has(TAG_MESH)
    ? meshFromBytes(sections.get(TAG_MESH)!, "MESH")
    : null;
  const template = sections.has(TAG_TEMPLATE)
    ? meshFromBytes(sections.get(TAG_TEMPLATE)!, "TMPL")
    : null;
  let meta: Record<string, unknown> = {};
  if (sections.has(TAG_META)) {
    let parsed: unknown;
    try {
      parsed = JSON.parse(new TextDecoder("utf-8", { fatal: true }).decode(sections.get(TAG_META)!));
    } catch (e) {
      throw new InvariantViolation(`META: invalid JSON (${e})`);
    }
    if (typeof parsed !== "object" || parsed === null || Array.isArray(parsed)) {
      throw new InvariantViolation("META: expected a JSON object");
    }
    meta = parsed as Record<string, unknown>;
  }
  return {
    field,
    skeleton,
    animation,
    tau: field.tau,
    mesh,
    template,
    meta,
    optState: sections.get(TAG_OPTSTATE) ?? null,
  };
}

/**
 * FNV-1a checksum of a tensor's raw little-endian f32 bytes; used by the
 * cross-component conformance tests to compare parsed tensors against the
 * reference importer without shipping the tensors twice.
 */
export function tensorChecksum(arr: Float32Array): string {
  const bytes = new Uint8Array(4 * arr.length);
  const dv = new DataView(bytes.buffer);
  for (let i = 0; i < arr.length; i++) dv.setFloat32(4 * i, arr[i], true);
  let hash = 0x811c9dc5;
  for (let i = 0; i < bytes.length; i++) {
    hash ^= bytes[i];
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash.toString(16).padStart(8, "0");
}

export function groupChecksums(g: FactorGroup): Record<string, string> {
  const out: Record<string, string> = {};
  for (const name of GROUP_TENSOR_NAMES) {
    out[name] = tensorChecksum(g[name]);
  }
  return out;
}
