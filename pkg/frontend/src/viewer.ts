/**
 * Interactive viewer: orbit camera, pose-timeline scrubbing, playback, a live
 * n_local control, and an FPS counter. Frame rendering is pure in
 * (asset, state): the loop consumes an immutable snapshot of ViewerState per
 * frame and accumulates nothing across frames.
 */

import type { AssetContainer } from "./container.js";
import { boneAffines, type Affine } from "./fk.js";
import { orbitCamera, type PinholeCamera } from "./camera.js";
import { drawFrame, uploadAsset, type GpuAsset } from "./gpu.js";

export interface ViewerState {
  frame: number; // current animation frame index
  playing: boolean;
  playbackFps: number;
  azimuthDeg: number;
  elevationDeg: number;
  /** camera distance as a multiple of the subject (bbox) diagonal */
  distanceScale: number;
  nLocal: number;
  background: [number, number, number];
}

/** Full horizontal drag across the canvas = one full turn. */
export const DRAG_FULL_TURN_DEG = 360;
export const ZOOM_MIN = 0.1;
export const ZOOM_MAX = 100;

export function defaultState(container: AssetContainer): ViewerState {
  const meta = container.meta;
  const nLocal = typeof meta["n_local"] === "number" ? (meta["n_local"] as number) : 16;
  const bg = Array.isArray(meta["background"])
    ? (meta["background"] as [number, number, number])
    : ([0, 0, 0] as [number, number, number]);
  return {
    frame: 0,
    playing: false,
    playbackFps: 15,
    azimuthDeg: 30,
    elevationDeg: 10,
    distanceScale: 1.8,
    nLocal,
    background: bg,
  };
}

export function clampState(state: ViewerState, frameCount: number): ViewerState {
  return {
    ...state,
    frame: Math.min(Math.max(state.frame, 0), Math.max(frameCount - 1, 0)),
    distanceScale: Math.min(Math.max(state.distanceScale, ZOOM_MIN), ZOOM_MAX),
    nLocal: Math.max(1, Math.round(state.nLocal)),
  };
}

export interface InteractionEvent {
  kind: "drag" | "wheel" | "scrub" | "playToggle" | "nLocal";
  dxFraction?: number; // drag: horizontal movement / canvas width
  dyFraction?: number; // drag: vertical movement / canvas height
  wheelSteps?: number;
  frame?: number;
  nLocal?: number;
}

/** Pure state-transition function for user input (unit-testable). */
export function interact(
  state: ViewerState,
  ev: InteractionEvent,
  frameCount: number,
): ViewerState {
  let next = { ...state };
  switch (ev.kind) {
    case "drag":
      next.azimuthDeg = state.azimuthDeg - (ev.dxFraction ?? 0) * DRAG_FULL_TURN_DEG;
      next.elevationDeg = Math.min(
        89,
        Math.max(-89, state.elevationDeg + (ev.dyFraction ?? 0) * 180),
      );
      break;
    case "wheel":
      next.distanceScale = state.distanceScale * Math.pow(1.1, ev.wheelSteps ?? 0);
      break;
    case "scrub":
      next.frame = ev.frame ?? state.frame;
      break;
    case "playToggle":
      next.playing = !state.playing;
      break;
    case "nLocal":
      next.nLocal = ev.nLocal ?? state.nLocal;
      break;
  }
  return clampState(next, frameCount);
}

export function affinesForFrame(container: AssetContainer, frame: number): Affine[] {
  const pose =
    container.animation.length > 0
      ? container.animation[Math.min(frame, container.animation.length - 1)]
      : {
          axisAngle: new Float32Array(container.skeleton.parents.length * 3),
          root: [0, 0, 0] as [number, number, number],
        };
  return boneAffines(container.skeleton, pose);
}

export function halfWidthOf(container: AssetContainer): number {
  const metaHw = container.meta["half_width"];
  if (typeof metaHw === "number" && metaHw > 0) return metaHw;
  return container.tau / 2;
}

export class Viewer {
  readonly gl: WebGL2RenderingContext;
  readonly asset: GpuAsset;
  state: ViewerState;
  private lastFrameTimes: number[] = [];
  private lastAdvance = 0;

  constructor(
    readonly canvas: HTMLCanvasElement,
    readonly container: AssetContainer,
  ) {
    const gl = canvas.getContext("webgl2");
    if (!gl) {
      throw new Error(
        "WebGL2 with float textures is required; this browser/GPU does not support it",
      );
    }
    this.gl = gl;
    this.asset = uploadAsset(gl, container);
    this.state = defaultState(container);
  }

  camera(): PinholeCamera {
    return orbitCamera(this.container.field, {
      azimuthDeg: this.state.azimuthDeg,
      elevationDeg: this.state.elevationDeg,
      distanceScale: this.state.distanceScale,
      imageSize: this.canvas.width,
    });
  }

  renderOnce(): void {
    const snapshot = clampState(this.state, this.container.animation.length);
    drawFrame(this.gl, this.asset, {
      camera: this.camera(),
      affines: affinesForFrame(this.container, snapshot.frame),
      nLocal: snapshot.nLocal,
      halfWidth: halfWidthOf(this.container),
      background: snapshot.background,
    });
  }

  /** Rolling FPS over the last second of frames. */
  fps(): number {
    if (this.lastFrameTimes.length < 2) return 0;
    const span =
      this.lastFrameTimes[this.lastFrameTimes.length - 1] - this.lastFrameTimes[0];
    return span > 0 ? ((this.lastFrameTimes.length - 1) * 1000) / span : 0;
  }

  tick(nowMs: number): void {
    if (this.state.playing && this.container.animation.length > 0) {
      if (nowMs - this.lastAdvance >= 1000 / this.state.playbackFps) {
        this.state = clampState(
          {
            ...this.state,
            frame: (this.state.frame + 1) % this.container.animation.length,
          },
          this.container.animation.length,
        );
        this.lastAdvance = nowMs;
      }
    }
    this.renderOnce();
    this.lastFrameTimes.push(nowMs);
    while (this.lastFrameTimes.length > 2 && nowMs - this.lastFrameTimes[0] > 1000) {
      this.lastFrameTimes.shift();
    }
  }
}
