/**
 * GLSL ES 3.0 shader pair implementing the real-time path on the GPU:
 * vertex-stage blend skinning with per-vertex inverse affines, fragment-stage
 * local emission-absorption raymarching over the factorized field.
 *
 * Texture sampling is manual bilinear (texelFetch of the 4 corner texels,
 * interpolation in the shader) so results are reproducible across vendors;
 * hardware filtering precision is not part of the conformance budget.
 */

export const MAX_BONES = 64;

export const VERTEX_SHADER = `#version 300 es
precision highp float;
precision highp int;

layout(location = 0) in vec3 aPosition;
layout(location = 1) in uvec4 aBoneIndex;
layout(location = 2) in vec4 aBoneWeight;

uniform mat3 uBoneLinear[${MAX_BONES}];
uniform vec3 uBoneTranslation[${MAX_BONES}];
uniform mat4 uViewProj; // world -> clip (pinhole, +Z forward)

out vec3 vWorld;
out mat3 vInvLinear;
out vec3 vInvTranslation;

void main() {
  // convex blend of bone affines (linear blend skinning)
  mat3 lin = mat3(0.0);
  vec3 trans = vec3(0.0);
  for (int k = 0; k < 4; k++) {
    int b = int(aBoneIndex[k]);
    float w = aBoneWeight[k];
    lin += w * uBoneLinear[b];
    trans += w * uBoneTranslation[b];
  }
  vec3 posed = lin * aPosition + trans;

  // per-vertex inverse affine, with a rigid fallback when the blend is
  // near-singular: the top-weight bone's affine is always invertible
  float det = determinant(lin);
  if (abs(det) < 1e-9) {
    int top = 0;
    float best = aBoneWeight[0];
    for (int k = 1; k < 4; k++) {
      if (aBoneWeight[k] > best) { best = aBoneWeight[k]; top = k; }
    }
    int b = int(aBoneIndex[top]);
    lin = uBoneLinear[b];
    trans = uBoneTranslation[b];
  }
  mat3 invLin = inverse(lin);
  vInvLinear = invLin;
  vInvTranslation = -(invLin * trans);
  vWorld = posed;
  gl_Position = uViewProj * vec4(posed, 1.0);
}
`;

export const FRAGMENT_SHADER = `#version 300 es
precision highp float;
precision highp int;
precision highp sampler2DArray;

in vec3 vWorld;
in mat3 vInvLinear;
in vec3 vInvTranslation;

// plane factors: layers ordered density ranks, then R/G/B ranks
uniform sampler2DArray uPlaneYX; // [layer](x: W, y: H)
uniform sampler2DArray uPlaneYZ; // [layer](x: D, y: H)
uniform sampler2DArray uPlaneXZ; // [layer](x: D, y: W)
// line factors: one row per layer
uniform sampler2D uLineZ; // (x: D, y: layer)
uniform sampler2D uLineX; // (x: W, y: layer)
uniform sampler2D uLineY; // (x: H, y: layer)

uniform ivec3 uDims;       // (W, H, D)
uniform int uRSigma;
uniform int uRC;
uniform vec3 uBboxMin;
uniform vec3 uBboxMax;
uniform float uGain;       // softplus gain
uniform vec3 uCamCenter;
uniform int uNLocal;
uniform float uHalfWidth;  // world units
uniform vec3 uBackground;

out vec4 fragColor;

// align-corners continuous grid coordinate in [0, n-1]
float gridCoord(float p, float lo, float hi, int n) {
  float t = clamp((p - lo) / (hi - lo), 0.0, 1.0);
  return t * float(n - 1);
}

// manual bilinear fetch of a plane layer at continuous (cx, cy)
float planeSample(sampler2DArray tex, float cx, float cy, int nx, int ny, int layer) {
  float fx = floor(cx);
  float fy = floor(cy);
  int x0 = int(fx);
  int y0 = int(fy);
  int x1 = min(x0 + 1, nx - 1);
  int y1 = min(y0 + 1, ny - 1);
  float ax = cx - fx;
  float ay = cy - fy;
  float v00 = texelFetch(tex, ivec3(x0, y0, layer), 0).r;
  float v10 = texelFetch(tex, ivec3(x1, y0, layer), 0).r;
  float v01 = texelFetch(tex, ivec3(x0, y1, layer), 0).r;
  float v11 = texelFetch(tex, ivec3(x1, y1, layer), 0).r;
  return mix(mix(v00, v10, ax), mix(v01, v11, ax), ay);
}

// manual linear fetch of a line row at continuous c
float lineSample(sampler2D tex, float c, int n, int layer) {
  float f = floor(c);
  int i0 = int(f);
  int i1 = min(i0 + 1, n - 1);
  float a = c - f;
  float v0 = texelFetch(tex, ivec2(i0, layer), 0).r;
  float v1 = texelFetch(tex, ivec2(i1, layer), 0).r;
  return mix(v0, v1, a);
}

// pre-activation channel value: sum over ranks of plane x line products
float rawChannel(vec3 g, int rankBase, int rank) {
  float acc = 0.0;
  for (int r = 0; r < rank; r++) {
    int layer = rankBase + r;
    acc += planeSample(uPlaneYX, g.x, g.y, uDims.x, uDims.y, layer)
           * lineSample(uLineZ, g.z, uDims.z, layer);
    acc += planeSample(uPlaneYZ, g.z, g.y, uDims.z, uDims.y, layer)
           * lineSample(uLineX, g.x, uDims.x, layer);
    acc += planeSample(uPlaneXZ, g.z, g.x, uDims.z, uDims.x, layer)
           * lineSample(uLineY, g.y, uDims.y, layer);
  }
  return acc;
}

float softplusGained(float raw) {
  float x = raw * uGain;
  return x > 20.0 ? x : log(1.0 + exp(x));
}

void main() {
  vec3 toFrag = vWorld - uCamCenter;
  float tHit = length(toFrag);
  vec3 dir = toFrag / tHit;

  float step = 2.0 * uHalfWidth / float(uNLocal);
  float transmittance = 1.0;
  vec3 accum = vec3(0.0);

  for (int i = 0; i < uNLocal; i++) {
    float t = tHit + (float(i) + 0.5) * step - uHalfWidth;
    t = max(t, 0.0);
    vec3 p = uCamCenter + dir * t;
    vec3 canon = vInvLinear * p + vInvTranslation;

    bool inside = all(greaterThanEqual(canon, uBboxMin))
               && all(lessThanEqual(canon, uBboxMax));
    float sigma = 0.0;
    vec3 rgb = vec3(0.5);
    if (inside) {
      vec3 g = vec3(
        gridCoord(canon.x, uBboxMin.x, uBboxMax.x, uDims.x),
        gridCoord(canon.y, uBboxMin.y, uBboxMax.y, uDims.y),
        gridCoord(canon.z, uBboxMin.z, uBboxMax.z, uDims.z));
      sigma = softplusGained(rawChannel(g, 0, uRSigma));
      if (sigma > 0.0) {
        rgb = vec3(
          1.0 / (1.0 + exp(-rawChannel(g, uRSigma, uRC))),
          1.0 / (1.0 + exp(-rawChannel(g, uRSigma + uRC, uRC))),
          1.0 / (1.0 + exp(-rawChannel(g, uRSigma + 2 * uRC, uRC))));
      }
    }
    float alpha = 1.0 - exp(-sigma * step);
    accum += transmittance * alpha * rgb;
    transmittance *= 1.0 - alpha;
  }

  vec3 color = accum + transmittance * uBackground;
  fragColor = vec4(color, 1.0 - transmittance);
}
`;
