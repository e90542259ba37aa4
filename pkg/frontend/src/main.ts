/**
 * Page entry: wires DOM controls to the Viewer. Query parameters:
 *   ?asset=URL      initial asset to fetch (default: golden.dvha test asset)
 *   ?n_local=N      initial per-fragment sample count
 *   ?az=DEG&el=DEG  initial orbit camera angles
 */

import { containerFromBytes, AssetError } from "./container.js";
import { interact, Viewer } from "./viewer.js";

function banner(msg: string): void {
  const el = document.getElementById("banner")!;
  el.textContent = msg;
  el.style.display = "block";
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(location.search);
  const url = params.get("asset") ?? "testdata/golden.dvha";
  const canvas = document.getElementById("view") as HTMLCanvasElement;

  let data: Uint8Array;
  try {
    const resp = await fetch(url);
    if (!resp.ok) throw new Error(`${resp.status} ${resp.statusText}`);
    data = new Uint8Array(await resp.arrayBuffer());
  } catch (e) {
    banner(`failed to fetch asset ${url}: ${e}`);
    return;
  }

  let viewer: Viewer;
  try {
    // parse off the render path; containerFromBytes validates everything
    const container = containerFromBytes(data);
    viewer = new Viewer(canvas, container);
  } catch (e) {
    if (e instanceof AssetError) {
      banner(`asset rejected (${(e as Error).name}): ${(e as Error).message}`);
    } else {
      banner(`${e}`);
    }
    return;
  }

  const nl = params.get("n_local");
  if (nl) viewer.state.nLocal = parseInt(nl, 10);
  const az = params.get("az");
  if (az) viewer.state.azimuthDeg = parseFloat(az);
  const el = params.get("el");
  if (el) viewer.state.elevationDeg = parseFloat(el);

  const frames = viewer.container.animation.length;
  const slider = document.getElementById("timeline") as HTMLInputElement;
  slider.max = String(Math.max(frames - 1, 0));
  slider.addEventListener("input", () => {
    viewer.state = interact(viewer.state, { kind: "scrub", frame: +slider.value }, frames);
  });

  const nlocalInput = document.getElementById("nlocal") as HTMLInputElement;
  nlocalInput.value = String(viewer.state.nLocal);
  nlocalInput.addEventListener("change", () => {
    viewer.state = interact(viewer.state, { kind: "nLocal", nLocal: +nlocalInput.value }, frames);
  });

  document.getElementById("play")!.addEventListener("click", () => {
    viewer.state = interact(viewer.state, { kind: "playToggle" }, frames);
  });

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("pointerdown", (e) => {
    dragging = true;
    lastX = e.clientX;
    lastY = e.clientY;
    canvas.setPointerCapture(e.pointerId);
  });
  canvas.addEventListener("pointerup", () => (dragging = false));
  canvas.addEventListener("pointermove", (e) => {
    if (!dragging) return;
    viewer.state = interact(
      viewer.state,
      {
        kind: "drag",
        dxFraction: (e.clientX - lastX) / canvas.clientWidth,
        dyFraction: (e.clientY - lastY) / canvas.clientHeight,
      },
      frames,
    );
    lastX = e.clientX;
    lastY = e.clientY;
  });
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    viewer.state = interact(
      viewer.state,
      { kind: "wheel", wheelSteps: Math.sign(e.deltaY) },
      frames,
    );
  });

  const fpsEl = document.getElementById("fps")!;
  const frameEl = document.getElementById("frameno")!;
  function loop(now: number): void {
    viewer.tick(now);
    slider.value = String(viewer.state.frame);
    fpsEl.textContent = `${viewer.fps().toFixed(1)} FPS`;
    frameEl.textContent = `frame ${viewer.state.frame}/${Math.max(frames - 1, 0)}`;
    requestAnimationFrame(loop);
  }
  requestAnimationFrame(loop);
}

boot();
