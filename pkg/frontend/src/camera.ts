/**
 * Pinhole camera with the reference renderer's conventions: extrinsics are
 * world-to-camera with +Z forward, pixel (cx, cy) on the optical axis, and
 * integer pixel coordinates addressing pixel centers. The orbit constructor
 * mirrors the CLI's "orbit:AZ,EL,SIZE" spec (eye on a sphere of radius
 * 1.8 x bbox diagonal around the bbox center, focal 1.1 x image size) so
 * headless captures line up with cmd_render_rt output.
 */

import type { FieldSection } from "./container.js";
import { mat3MulVec, mat3Transpose, type Mat3, type Vec3 } from "./fk.js";

export interface PinholeCamera {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  rotation: Mat3; // world-to-camera, row-major
  translation: Vec3;
  width: number;
  height: number;
}

export function cameraCenter(cam: PinholeCamera): Vec3 {
  const t = mat3MulVec(mat3Transpose(cam.rotation), cam.translation);
  return [-t[0], -t[1], -t[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
}

function normalize(v: Vec3): Vec3 {
  const n = Math.hypot(v[0], v[1], v[2]);
  return [v[0] / n, v[1] / n, v[2] / n];
}

export function lookAtCamera(
  eye: Vec3,
  target: Vec3,
  imageSize: number,
  up: Vec3 = [0, 0, 1],
  focal?: number,
): PinholeCamera {
  const fwd = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
  let right = cross(fwd, up);
  if (Math.hypot(right[0], right[1], right[2]) < 1e-9) {
    right = cross(fwd, [0, 1, 0]);
  }
  right = normalize(right);
  const down = cross(fwd, right);
  const r = new Float64Array([
    right[0], right[1], right[2],
    down[0], down[1], down[2],
    fwd[0], fwd[1], fwd[2],
  ]);
  const t: Vec3 = [
    -(r[0] * eye[0] + r[1] * eye[1] + r[2] * eye[2]),
    -(r[3] * eye[0] + r[4] * eye[1] + r[5] * eye[2]),
    -(r[6] * eye[0] + r[7] * eye[1] + r[8] * eye[2]),
  ];
  const f = focal ?? 1.1 * imageSize;
  return {
    fx: f,
    fy: f,
    cx: (imageSize - 1) / 2,
    cy: (imageSize - 1) / 2,
    rotation: r,
    translation: t,
    width: imageSize,
    height: imageSize,
  };
}

export interface OrbitParams {
  azimuthDeg: number;
  elevationDeg: number;
  /** camera distance as a multiple of the bbox diagonal */
  distanceScale: number;
  imageSize: number;
}

export function orbitCamera(field: FieldSection, p: OrbitParams): PinholeCamera {
  const center: Vec3 = [
    (field.bboxMin[0] + field.bboxMax[0]) / 2,
    (field.bboxMin[1] + field.bboxMax[1]) / 2,
    (field.bboxMin[2] + field.bboxMax[2]) / 2,
  ];
  const diag = Math.hypot(
    field.bboxMax[0] - field.bboxMin[0],
    field.bboxMax[1] - field.bboxMin[1],
    field.bboxMax[2] - field.bboxMin[2],
  );
  const r = p.distanceScale * diag;
  const az = (p.azimuthDeg * Math.PI) / 180;
  const el = (p.elevationDeg * Math.PI) / 180;
  const eye: Vec3 = [
    center[0] + r * Math.cos(el) * Math.cos(az),
    center[1] + r * Math.cos(el) * Math.sin(az),
    center[2] + r * Math.sin(el),
  ];
  return lookAtCamera(eye, center, p.imageSize);
}

/**
 * Column-major 4x4 world->clip matrix for WebGL. Maps the camera's pixel
 * coordinates (integer = pixel center) onto GL fragment centers (half-integer
 * window coordinates), with image row 0 at the top of the flipped readback.
 */
export function viewProjection(cam: PinholeCamera, near: number, far: number): Float32Array {
  const { fx, fy, cx, cy, width: w, height: h } = cam;
  const r = cam.rotation;
  const t = cam.translation;
  // world -> camera rows
  const rows = [
    [r[0], r[1], r[2], t[0]],
    [r[3], r[4], r[5], t[1]],
    [r[6], r[7], r[8], t[2]],
  ];
  // camera -> clip rows
  const p00 = (2 * fx) / w;
  const p02 = (2 * (cx + 0.5)) / w - 1;
  const p11 = (-2 * fy) / h;
  const p12 = 1 - (2 * (cy + 0.5)) / h;
  const p22 = (far + near) / (far - near);
  const p23 = (-2 * far * near) / (far - near);
  const proj = [
    [p00, 0, p02, 0],
    [0, p11, p12, 0],
    [0, 0, p22, p23],
    [0, 0, 1, 0],
  ];
  // M = proj * [R|t; 0 0 0 1], stored column-major for uniformMatrix4fv
  const out = new Float32Array(16);
  for (let i = 0; i < 4; i++) {
    for (let j = 0; j < 4; j++) {
      let acc = 0;
      for (let k = 0; k < 3; k++) acc += proj[i][k] * rows[k][j];
      acc += proj[i][3] * (j === 3 ? 1 : 0);
      out[j * 4 + i] = acc;
    }
  }
  return out;
}
