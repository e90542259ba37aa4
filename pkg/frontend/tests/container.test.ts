/**
 * Container parser tests against the golden asset committed by the reference
 * implementation, plus the error-taxonomy cases. Tensor agreement is checked
 * with the shared FNV-1a checksums so the two parsers are compared without
 * duplicating the data.
 */

import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import {
  AssetError,
  BadMagic,
  containerFromBytes,
  groupChecksums,
  InvariantViolation,
  TruncatedSection,
  UnsupportedVersion,
} from "../src/container.js";

const dataDir = fileURLToPath(new URL("../testdata/", import.meta.url));
const golden = new Uint8Array(readFileSync(dataDir + "golden.dvha"));
const checksums = JSON.parse(readFileSync(dataDir + "checksums.json", "utf-8"));

describe("golden asset", () => {
  const c = containerFromBytes(golden);

  it("reports dims and ranks matching the reference", () => {
    expect(c.field.dims).toEqual(checksums.meta.dims);
    expect(c.field.rSigma).toBe(checksums.meta.r_sigma);
    expect(c.field.rC).toBe(checksums.meta.r_c);
    expect(c.field.gain).toBeCloseTo(checksums.meta.gain, 12);
    expect(c.tau).toBeCloseTo(checksums.meta.tau, 12);
  });

  it("param count matches the reference formula", () => {
    const { d, h, w } = c.field.dims;
    const perRank = h * w + h * d + w * d + h + w + d;
    const count = c.field.rSigma * perRank + 3 * c.field.rC * perRank;
    expect(count).toBe(checksums.meta.param_count);
  });

  it("factor tensors checksum-match the reference importer", () => {
    expect(groupChecksums(c.field.density)).toEqual(checksums.groups.density);
    expect(groupChecksums(c.field.color[0])).toEqual(checksums.groups.red);
    expect(groupChecksums(c.field.color[1])).toEqual(checksums.groups.green);
    expect(groupChecksums(c.field.color[2])).toEqual(checksums.groups.blue);
  });

  it("carries mesh, animation, and meta", () => {
    expect(c.mesh).not.toBeNull();
    expect(c.mesh!.faces.length % 3).toBe(0);
    expect(c.animation.length).toBe(4);
    expect(c.meta["n_local"]).toBe(16);
    expect(c.skeleton.parents[0]).toBe(-1);
  });

  it("mesh weights are convex rows", () => {
    const w = c.mesh!.boneWeights;
    for (let i = 0; i < w.length / 4; i++) {
      const sum = w[4 * i] + w[4 * i + 1] + w[4 * i + 2] + w[4 * i + 3];
      expect(Math.abs(sum - 1)).toBeLessThan(1e-4);
    }
  });
});

describe("error taxonomy", () => {
  it("bad magic", () => {
    const bad = new Uint8Array(golden);
    bad[0] = 0x58;
    expect(() => containerFromBytes(bad)).toThrow(BadMagic);
    expect(() => containerFromBytes(bad)).toThrow(/offset 0/);
  });

  it("unsupported version", () => {
    const bad = new Uint8Array(golden);
    new DataView(bad.buffer).setUint32(4, 99, true);
    expect(() => containerFromBytes(bad)).toThrow(UnsupportedVersion);
    expect(() => containerFromBytes(bad)).toThrow(/version 99/);
  });

  it("bad endian flag", () => {
    const bad = new Uint8Array(golden);
    bad[8] = 0;
    expect(() => containerFromBytes(bad)).toThrow(UnsupportedVersion);
    expect(() => containerFromBytes(bad)).toThrow(/endianness/);
  });

  it("truncated header", () => {
    expect(() => containerFromBytes(golden.subarray(0, 6))).toThrow(TruncatedSection);
  });

  it("truncated table", () => {
    expect(() => containerFromBytes(golden.subarray(0, 20))).toThrow(TruncatedSection);
  });

  it("truncated payload", () => {
    expect(() => containerFromBytes(golden.subarray(0, golden.length - 10))).toThrow(
      TruncatedSection,
    );
  });

  it("duplicate tag", () => {
    const bad = new Uint8Array(golden);
    const dv = new DataView(bad.buffer);
    // overwrite the second table entry's tag with the first's
    dv.setUint32(13 + 20, dv.getUint32(13, true), true);
    expect(() => containerFromBytes(bad)).toThrow(InvariantViolation);
    expect(() => containerFromBytes(bad)).toThrow(/duplicate/);
  });

  it("non-finite factor entry", () => {
    const bad = new Uint8Array(golden);
    const dv = new DataView(bad.buffer);
    const count = dv.getUint32(9, true);
    for (let i = 0; i < count; i++) {
      const tag = dv.getUint32(13 + i * 20, true);
      if (tag === 0x4c454946 /* FIEL */) {
        const off = Number(dv.getBigUint64(13 + i * 20 + 4, true));
        dv.setFloat32(off + 84, NaN, true);
      }
    }
    expect(() => containerFromBytes(bad)).toThrow(/non-finite/);
  });

  it("trailing ANIM bytes", () => {
    const bad = new Uint8Array(golden);
    const dv = new DataView(bad.buffer);
    const count = dv.getUint32(9, true);
    for (let i = 0; i < count; i++) {
      const tag = dv.getUint32(13 + i * 20, true);
      if (tag === 0x4d494e41 /* ANIM */) {
        const off = Number(dv.getBigUint64(13 + i * 20 + 4, true));
        dv.setUint32(off, 2, true); // claim 2 frames, store 4
      }
    }
    expect(() => containerFromBytes(bad)).toThrow(/trailing/);
  });
});

describe("mutation fuzz", () => {
  it("never throws anything but AssetError", () => {
    // deterministic xorshift so failures reproduce
    let s = 12345 >>> 0;
    const rnd = () => {
      s ^= s << 13;
      s ^= s >>> 17;
      s ^= s << 5;
      return (s >>> 0) / 0x100000000;
    };
    for (let iter = 0; iter < 2000; iter++) {
      const data = new Uint8Array(golden);
      const nmut = 1 + Math.floor(rnd() * 3);
      for (let k = 0; k < nmut; k++) {
        data[Math.floor(rnd() * data.length)] = Math.floor(rnd() * 256);
      }
      try {
        containerFromBytes(data);
      } catch (e) {
        expect(e).toBeInstanceOf(AssetError);
      }
    }
  });

  it("survives truncation sweep", () => {
    for (let n = 0; n < golden.length; n += 397) {
      try {
        containerFromBytes(golden.subarray(0, n));
      } catch (e) {
        expect(e).toBeInstanceOf(AssetError);
      }
    }
  });
});
