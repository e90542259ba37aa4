/**
 * Host-side forward kinematics and blend-skinning math.
 *
 * Re-implements the reference implementation's quaternion/FK pipeline in
 * double precision so bone affines computed per frame agree with the shared
 * JSON test vectors to 1e-5 per matrix entry. Conventions: quaternions are
 * (w, x, y, z); an affine is a row-major 3x4 [R | t]; A_b = G_b(pose) ∘
 * G_b(rest)^-1 maps canonical points rigidly attached to bone b to their
 * posed locations.
 */

import type { PoseFrame, SkeletonSection } from "./container.js";

export type Vec3 = [number, number, number];
export type Quat = [number, number, number, number]; // (w, x, y, z)

/** Row-major 3x3 stored as 9 numbers. */
export type Mat3 = Float64Array;

export interface Affine {
  linear: Mat3; // 3x3 row-major
  translation: Vec3;
}

export function axisAngleToQuat(aa: Vec3): Quat {
  const angle = Math.hypot(aa[0], aa[1], aa[2]);
  const half = 0.5 * angle;
  // Taylor expansion of sin(t/2)/t near zero, matching the reference
  const k = angle < 1e-8 ? 0.5 - (angle * angle) / 48.0 : Math.sin(half) / angle;
  return [Math.cos(half), aa[0] * k, aa[1] * k, aa[2] * k];
}

export function quatNormalize(q: Quat): Quat {
  const n = Math.hypot(q[0], q[1], q[2], q[3]);
  return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
}

export function quatToMatrix(q: Quat): Mat3 {
  const [w, x, y, z] = q;
  return new Float64Array([
    1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
    2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
    2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
  ]);
}

export function mat3Mul(a: Mat3, b: Mat3): Mat3 {
  const out = new Float64Array(9);
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      out[3 * i + j] =
        a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
    }
  }
  return out;
}

export function mat3MulVec(a: Mat3, v: Vec3): Vec3 {
  return [
    a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
    a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
    a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
  ];
}

export function mat3Transpose(a: Mat3): Mat3 {
  return new Float64Array([a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]);
}

export function mat3Det(a: Mat3): number {
  return (
    a[0] * (a[4] * a[8] - a[5] * a[7]) -
    a[1] * (a[3] * a[8] - a[5] * a[6]) +
    a[2] * (a[3] * a[7] - a[4] * a[6])
  );
}

export function mat3Inverse(a: Mat3): Mat3 {
  const det = mat3Det(a);
  const inv = new Float64Array(9);
  inv[0] = (a[4] * a[8] - a[5] * a[7]) / det;
  inv[1] = (a[2] * a[7] - a[1] * a[8]) / det;
  inv[2] = (a[1] * a[5] - a[2] * a[4]) / det;
  inv[3] = (a[5] * a[6] - a[3] * a[8]) / det;
  inv[4] = (a[0] * a[8] - a[2] * a[6]) / det;
  inv[5] = (a[2] * a[3] - a[0] * a[5]) / det;
  inv[6] = (a[3] * a[7] - a[4] * a[6]) / det;
  inv[7] = (a[1] * a[6] - a[0] * a[7]) / det;
  inv[8] = (a[0] * a[4] - a[1] * a[3]) / det;
  return inv;
}

function poseQuats(skeleton: SkeletonSection, frame: PoseFrame): Quat[] {
  const b = skeleton.parents.length;
  const quats: Quat[] = [];
  for (let i = 0; i < b; i++) {
    quats.push(
      quatNormalize(
        axisAngleToQuat([
          frame.axisAngle[3 * i],
          frame.axisAngle[3 * i + 1],
          frame.axisAngle[3 * i + 2],
        ]),
      ),
    );
  }
  return quats;
}

/**
 * World transforms G_b: G_0 = g_0, G_b = G_parent(b) ∘ g_b, where g_b
 * rotates by the pose quaternion and translates by the rest offset; the
 * root additionally translates by the pose's root translation.
 */
export function forwardKinematics(
  skeleton: SkeletonSection,
  frame: PoseFrame,
): Affine[] {
  const b = skeleton.parents.length;
  const rots = poseQuats(skeleton, frame).map(quatToMatrix);
  const out: Affine[] = [];
  for (let i = 0; i < b; i++) {
    const off: Vec3 = [
      skeleton.offsets[3 * i],
      skeleton.offsets[3 * i + 1],
      skeleton.offsets[3 * i + 2],
    ];
    if (i === 0) {
      out.push({
        linear: rots[0],
        translation: [
          off[0] + frame.root[0],
          off[1] + frame.root[1],
          off[2] + frame.root[2],
        ],
      });
    } else {
      const p = skeleton.parents[i];
      const lin = mat3Mul(out[p].linear, rots[i]);
      const t = mat3MulVec(out[p].linear, off);
      out.push({
        linear: lin,
        translation: [
          t[0] + out[p].translation[0],
          t[1] + out[p].translation[1],
          t[2] + out[p].translation[2],
        ],
      });
    }
  }
  return out;
}

function restFrame(skeleton: SkeletonSection): PoseFrame {
  return { axisAngle: skeleton.restAxisAngle, root: skeleton.restRoot };
}

/** A_b = G_b(pose) ∘ G_b(rest)^-1, computed exactly like the reference. */
export function boneAffines(
  skeleton: SkeletonSection,
  frame: PoseFrame,
): Affine[] {
  const g = forwardKinematics(skeleton, frame);
  const g0 = forwardKinematics(skeleton, restFrame(skeleton));
  const out: Affine[] = [];
  for (let b = 0; b < g.length; b++) {
    // inverse of rigid (R, t) is (R^T, -R^T t)
    const lin = mat3Mul(g[b].linear, mat3Transpose(g0[b].linear));
    const rt = mat3MulVec(lin, g0[b].translation);
    out.push({
      linear: lin,
      translation: [
        g[b].translation[0] - rt[0],
        g[b].translation[1] - rt[1],
        g[b].translation[2] - rt[2],
      ],
    });
  }
  return out;
}

/** Flatten affines to a mat3 array + vec3 array for uniform upload (f32). */
export function affinesToUniforms(affines: Affine[]): {
  linear: Float32Array; // [B * 9] row-major per bone
  translation: Float32Array; // [B * 3]
} {
  const linear = new Float32Array(affines.length * 9);
  const translation = new Float32Array(affines.length * 3);
  affines.forEach((a, b) => {
    linear.set(a.linear, 9 * b);
    translation.set(a.translation, 3 * b);
  });
  return { linear, translation };
}
