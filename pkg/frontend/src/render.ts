import {
  GT_COLOR,
  NEGATIVE_CLICK_COLOR,
  POSITIVE_CLICK_COLOR,
  classColor,
  heatColor,
  heightColor,
} from './colors.js';
import type { HeatmapPayload, WireBox, WireClick } from './types.js';
import { ViewTransform, boxCorners } from './view.js';

/** The drawing surface subset the renderer needs (mockable in tests). */
export interface Canvas2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  globalAlpha: number;
  font: string;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
  stroke(): void;
  fill(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  fillText(text: string, x: number, y: number): void;
}

export interface SceneGeometry {
  xyz: Float64Array | number[];
  nPoints: number;
}

export interface Overlays {
  detections: WireBox[];
  gtBoxes: WireBox[];
  clicks: WireClick[];
  heatmap: HeatmapPayload | null;
  showDetections: boolean;
  showGt: boolean;
  showHeatmap: boolean;
}

export const EMPTY_OVERLAYS: Overlays = {
  detections: [],
  gtBoxes: [],
  clicks: [],
  heatmap: null,
  showDetections: true,
  showGt: false,
  showHeatmap: false,
};

function drawBox(ctx: Canvas2D, view: ViewTransform, box: WireBox, color: string, width: number): void {
  const corners = boxCorners(box.cx, box.cy, box.l, box.w, box.yaw);
  ctx.strokeStyle = color;
  ctx.lineWidth = width;
  ctx.beginPath();
  corners.forEach(([wx, wy], i) => {
    const [sx, sy] = view.worldToScreen(wx, wy);
    if (i === 0) ctx.moveTo(sx, sy);
    else ctx.lineTo(sx, sy);
  });
  ctx.closePath();
  ctx.stroke();
  // heading tick from center to the front edge midpoint
  const [cx, cy] = view.worldToScreen(box.cx, box.cy);
  const [fx, fy] = view.worldToScreen(
    box.cx + (Math.cos(box.yaw) * box.l) / 2,
    box.cy + (Math.sin(box.yaw) * box.l) / 2,
  );
  ctx.beginPath();
  ctx.moveTo(cx, cy);
  ctx.lineTo(fx, fy);
  ctx.stroke();
}

function drawAxes(ctx: Canvas2D, view: ViewTransform): void {
  ctx.strokeStyle = '#333a44';
  ctx.lineWidth = 1;
  const [ox, oy] = view.worldToScreen(0, 0);
  ctx.beginPath();
  ctx.moveTo(0, oy);
  ctx.lineTo(view.width, oy);
  ctx.stroke();
  ctx.beginPath();
  ctx.moveTo(ox, 0);
  ctx.lineTo(ox, view.height);
  ctx.stroke();
}

/**
 * Paint one full frame: background, axes, height-colored points, optional
 * correlation overlay, boxes, and click markers. Pure function of its
 * arguments, so identical inputs paint identical frames.
 */
export function renderScene(
  ctx: Canvas2D,
  view: ViewTransform,
  scene: SceneGeometry | null,
  overlays: Overlays,
): void {
  ctx.globalAlpha = 1;
  ctx.clearRect(0, 0, view.width, view.height);
  ctx.fillStyle = '#10141a';
  ctx.fillRect(0, 0, view.width, view.height);
  drawAxes(ctx, view);
  if (!scene) return;

  const xyz = scene.xyz;
  let zMin = Infinity;
  let zMax = -Infinity;
  for (let i = 0; i < scene.nPoints; i++) {
    const z = xyz[3 * i + 2] as number;
    if (z < zMin) zMin = z;
    if (z > zMax) zMax = z;
  }
  for (let i = 0; i < scene.nPoints; i++) {
    const [sx, sy] = view.worldToScreen(xyz[3 * i] as number, xyz[3 * i + 1] as number);
    if (sx < -2 || sy < -2 || sx > view.width + 2 || sy > view.height + 2) continue;
    ctx.fillStyle = heightColor(xyz[3 * i + 2] as number, zMin, zMax);
    ctx.fillRect(sx - 1, sy - 1, 2, 2);
  }

  if (overlays.showHeatmap && overlays.heatmap) {
    const hm = overlays.heatmap;
    ctx.globalAlpha = 0.85;
    for (let i = 0; i < hm.n_points; i++) {
      const [sx, sy] = view.worldToScreen(hm.xy[2 * i] as number, hm.xy[2 * i + 1] as number);
      ctx.fillStyle = heatColor(hm.values[i] as number);
      ctx.fillRect(sx - 2, sy - 2, 4, 4);
    }
    ctx.globalAlpha = 1;
  }

  if (overlays.showGt) {
    for (const box of overlays.gtBoxes) drawBox(ctx, view, box, GT_COLOR, 1);
  }
  if (overlays.showDetections) {
    for (const box of overlays.detections) {
      drawBox(ctx, view, box, classColor(box.class), 2);
      if (box.score !== undefined) {
        const [sx, sy] = view.worldToScreen(box.cx, box.cy);
        ctx.fillStyle = classColor(box.class);
        ctx.font = '10px sans-serif';
        ctx.fillText(box.score.toFixed(2), sx + 4, sy - 4);
      }
    }
  }

  for (const click of overlays.clicks) {
    const [sx, sy] = view.worldToScreen(click.x, click.y);
    ctx.strokeStyle = click.kind === 'pos' ? POSITIVE_CLICK_COLOR : NEGATIVE_CLICK_COLOR;
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.arc(sx, sy, 6, 0, 2 * Math.PI);
    ctx.stroke();
    ctx.beginPath();
    ctx.moveTo(sx - 3, sy);
    ctx.lineTo(sx + 3, sy);
    ctx.stroke();
    if (click.kind === 'pos') {
      ctx.beginPath();
      ctx.moveTo(sx, sy - 3);
      ctx.lineTo(sx, sy + 3);
      ctx.stroke();
    }
  }
}
