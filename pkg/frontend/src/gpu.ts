/**
 * WebGL2 resource management: uploads a parsed AssetContainer to the GPU
 * (factor textures bit-matching the container tensors, mesh buffers, skinning
 * attributes) and draws one frame with host-computed bone affines.
 */

import type { AssetContainer, FactorGroup, RiggedMesh } from "./container.js";
import type { Affine } from "./fk.js";
import { affinesToUniforms } from "./fk.js";
import { cameraCenter, viewProjection, type PinholeCamera } from "./camera.js";
import { FRAGMENT_SHADER, MAX_BONES, VERTEX_SHADER } from "./shaders.js";

export class GpuError extends Error {
  override name = "GpuError";
}

function compile(gl: WebGL2RenderingContext, type: number, src: string): WebGLShader {
  const sh = gl.createShader(type)!;
  gl.shaderSource(sh, src);
  gl.compileShader(sh);
  if (!gl.getShaderParameter(sh, gl.COMPILE_STATUS)) {
    throw new GpuError(`shader compile failed: ${gl.getShaderInfoLog(sh)}`);
  }
  return sh;
}

function link(gl: WebGL2RenderingContext, vs: string, fs: string): WebGLProgram {
  const prog = gl.createProgram()!;
  gl.attachShader(prog, compile(gl, gl.VERTEX_SHADER, vs));
  gl.attachShader(prog, compile(gl, gl.FRAGMENT_SHADER, fs));
  gl.linkProgram(prog);
  if (!gl.getProgramParameter(prog, gl.LINK_STATUS)) {
    throw new GpuError(`program link failed: ${gl.getProgramInfoLog(prog)}`);
  }
  return prog;
}

/** Pack the four factor groups' layers in the serialization order
 * (density ranks, then R, G, B ranks). */
function packLayers(
  groups: FactorGroup[],
  pick: (g: FactorGroup) => Float32Array,
  layerSize: number,
): Float32Array {
  const total = groups.reduce((n, g) => n + g.rank, 0);
  const out = new Float32Array(total * layerSize);
  let layer = 0;
  for (const g of groups) {
    const src = pick(g);
    out.set(src, layer * layerSize);
    layer += g.rank;
  }
  return out;
}

function planeArrayTexture(
  gl: WebGL2RenderingContext,
  width: number,
  height: number,
  layers: number,
  data: Float32Array,
): WebGLTexture {
  const tex = gl.createTexture()!;
  gl.bindTexture(gl.TEXTURE_2D_ARRAY, tex);
  gl.texParameteri(gl.TEXTURE_2D_ARRAY, gl.TEXTURE_MIN_FILTER, gl.NEAREST);
  gl.texParameteri(gl.TEXTURE_2D_ARRAY, gl.TEXTURE_MAG_FILTER, gl.NEAREST);
  gl.texStorage3D(gl.TEXTURE_2D_ARRAY, 1, gl.R32F, width, height, Math.max(layers, 1));
  if (layers > 0) {
    gl.texSubImage3D(
      gl.TEXTURE_2D_ARRAY, 0, 0, 0, 0, width, height, layers,
      gl.RED, gl.FLOAT, data,
    );
  }
  return tex;
}

function lineTexture(
  gl: WebGL2RenderingContext,
  width: number,
  rows: number,
  data: Float32Array,
): WebGLTexture {
  const tex = gl.createTexture()!;
  gl.bindTexture(gl.TEXTURE_2D, tex);
  gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MIN_FILTER, gl.NEAREST);
  gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MAG_FILTER, gl.NEAREST);
  gl.texStorage2D(gl.TEXTURE_2D, 1, gl.R32F, width, Math.max(rows, 1));
  if (rows > 0) {
    gl.texSubImage2D(gl.TEXTURE_2D, 0, 0, 0, width, rows, gl.RED, gl.FLOAT, data);
  }
  return tex;
}

export interface GpuAsset {
  program: WebGLProgram;
  vao: WebGLVertexArrayObject;
  indexCount: number;
  textures: Record<string, WebGLTexture>;
  dims: { w: number; h: number; d: number };
  rSigma: number;
  rC: number;
  bboxMin: [number, number, number];
  bboxMax: [number, number, number];
  gain: number;
  boneCount: number;
}

export function uploadAsset(gl: WebGL2RenderingContext, container: AssetContainer): GpuAsset {
  const mesh: RiggedMesh | null = container.mesh;
  if (!mesh) {
    throw new GpuError("asset has no MESH section; export one with the mesh tool first");
  }
  if (container.skeleton.parents.length > MAX_BONES) {
    throw new GpuError(`skeleton exceeds ${MAX_BONES} bones`);
  }
  if (!gl.getExtension("EXT_color_buffer_float")) {
    // not strictly required for rendering to an RGBA8 canvas, but its absence
    // usually signals missing float-texture support worth surfacing early
  }

  const f = container.field;
  const { d, h, w } = f.dims;
  const groups = [f.density, ...f.color];

  const program = link(gl, VERTEX_SHADER, FRAGMENT_SHADER);

  // vertex buffers
  const vao = gl.createVertexArray()!;
  gl.bindVertexArray(vao);
  const vbo = gl.createBuffer()!;
  gl.bindBuffer(gl.ARRAY_BUFFER, vbo);
  gl.bufferData(gl.ARRAY_BUFFER, mesh.vertices, gl.STATIC_DRAW);
  gl.enableVertexAttribArray(0);
  gl.vertexAttribPointer(0, 3, gl.FLOAT, false, 0, 0);

  const ibo = gl.createBuffer()!;
  gl.bindBuffer(gl.ARRAY_BUFFER, ibo);
  gl.bufferData(gl.ARRAY_BUFFER, mesh.boneIndices, gl.STATIC_DRAW);
  gl.enableVertexAttribArray(1);
  gl.vertexAttribIPointer(1, 4, gl.UNSIGNED_SHORT, 0, 0);

  const wbo = gl.createBuffer()!;
  gl.bindBuffer(gl.ARRAY_BUFFER, wbo);
  gl.bufferData(gl.ARRAY_BUFFER, mesh.boneWeights, gl.STATIC_DRAW);
  gl.enableVertexAttribArray(2);
  gl.vertexAttribPointer(2, 4, gl.FLOAT, false, 0, 0);

  const ebo = gl.createBuffer()!;
  gl.bindBuffer(gl.ELEMENT_ARRAY_BUFFER, ebo);
  gl.bufferData(gl.ELEMENT_ARRAY_BUFFER, mesh.faces, gl.STATIC_DRAW);
  gl.bindVertexArray(null);

  // factor textures, layer order = serialization order
  const textures: Record<string, WebGLTexture> = {
    planeYX: planeArrayTexture(gl, w, h, f.rSigma + 3 * f.rC,
      packLayers(groups, (g) => g.planeYX, h * w)),
    planeYZ: planeArrayTexture(gl, d, h, f.rSigma + 3 * f.rC,
      packLayers(groups, (g) => g.planeYZ, h * d)),
    planeXZ: planeArrayTexture(gl, d, w, f.rSigma + 3 * f.rC,
      packLayers(groups, (g) => g.planeXZ, w * d)),
    lineZ: lineTexture(gl, d, f.rSigma + 3 * f.rC,
      packLayers(groups, (g) => g.lineZ, d)),
    lineX: lineTexture(gl, w, f.rSigma + 3 * f.rC,
      packLayers(groups, (g) => g.lineX, w)),
    lineY: lineTexture(gl, h, f.rSigma + 3 * f.rC,
      packLayers(groups, (g) => g.lineY, h)),
  };

  return {
    program,
    vao,
    indexCount: mesh.faces.length,
    textures,
    dims: { w, h, d },
    rSigma: f.rSigma,
    rC: f.rC,
    bboxMin: f.bboxMin,
    bboxMax: f.bboxMax,
    gain: f.gain,
    boneCount: container.skeleton.parents.length,
  };
}

export interface DrawParams {
  camera: PinholeCamera;
  affines: Affine[];
  nLocal: number;
  halfWidth: number;
  background: [number, number, number];
}

export function drawFrame(gl: WebGL2RenderingContext, asset: GpuAsset, p: DrawParams): void {
  const cam = p.camera;
  gl.viewport(0, 0, cam.width, cam.height);
  gl.enable(gl.DEPTH_TEST);
  gl.disable(gl.CULL_FACE); // closed meshes: nearest-fragment depth test suffices
  gl.clearColor(p.background[0], p.background[1], p.background[2], 0);
  gl.clearDepth(1);
  gl.clear(gl.COLOR_BUFFER_BIT | gl.DEPTH_BUFFER_BIT);

  gl.useProgram(asset.program);
  const u = (name: string) => gl.getUniformLocation(asset.program, name);

  const diag = Math.hypot(
    asset.bboxMax[0] - asset.bboxMin[0],
    asset.bboxMax[1] - asset.bboxMin[1],
    asset.bboxMax[2] - asset.bboxMin[2],
  );
  const near = Math.max(1e-3, 0.01 * diag);
  const far = 100 * diag + 10;
  gl.uniformMatrix4fv(u("uViewProj"), false, viewProjection(cam, near, far));

  const uni = affinesToUniforms(p.affines);
  gl.uniformMatrix3fv(u(`uBoneLinear[0]`), true, uni.linear);
  gl.uniform3fv(u(`uBoneTranslation[0]`), uni.translation);

  const center = cameraCenter(cam);
  gl.uniform3f(u("uCamCenter"), center[0], center[1], center[2]);
  gl.uniform3i(u("uDims"), asset.dims.w, asset.dims.h, asset.dims.d);
  gl.uniform1i(u("uRSigma"), asset.rSigma);
  gl.uniform1i(u("uRC"), asset.rC);
  gl.uniform3fv(u("uBboxMin"), asset.bboxMin);
  gl.uniform3fv(u("uBboxMax"), asset.bboxMax);
  gl.uniform1f(u("uGain"), asset.gain);
  gl.uniform1i(u("uNLocal"), p.nLocal);
  gl.uniform1f(u("uHalfWidth"), p.halfWidth);
  gl.uniform3fv(u("uBackground"), p.background);

  const order = ["planeYX", "planeYZ", "planeXZ"];
  order.forEach((name, i) => {
    gl.activeTexture(gl.TEXTURE0 + i);
    gl.bindTexture(gl.TEXTURE_2D_ARRAY, asset.textures[name]);
    gl.uniform1i(u(`uP${name.slice(1)}`), i);
  });
  const lines = ["lineZ", "lineX", "lineY"];
  lines.forEach((name, i) => {
    gl.activeTexture(gl.TEXTURE3 + i);
    gl.bindTexture(gl.TEXTURE_2D, asset.textures[name]);
    gl.uniform1i(u(`uL${name.slice(1)}`), 3 + i);
  });

  gl.bindVertexArray(asset.vao);
  gl.drawElements(gl.TRIANGLES, asset.indexCount, gl.UNSIGNED_INT, 0);
  gl.bindVertexArray(null);
}

/** Read back the canvas as a top-to-bottom RGBA image (for conformance). */
export function readPixels(gl: WebGL2RenderingContext, width: number, height: number): Uint8Array {
  const raw = new Uint8Array(width * height * 4);
  gl.readPixels(0, 0, width, height, gl.RGBA, gl.UNSIGNED_BYTE, raw);
  const out = new Uint8Array(raw.length);
  const rowBytes = width * 4;
  for (let y = 0; y < height; y++) {
    out.set(raw.subarray(y * rowBytes, (y + 1) * rowBytes), (height - 1 - y) * rowBytes);
  }
  return out;
}
