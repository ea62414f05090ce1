/**
 * World (meters, y up) to screen (pixels, y down) mapping with pan/zoom.
 * The transform is always invertible: scale is kept strictly positive.
 */
export class ViewTransform {
  /** pixels per meter */
  scale: number;
  /** world coordinate at the canvas center */
  centerX: number;
  centerY: number;

  constructor(
    public width: number,
    public height: number,
    scale = 20,
    centerX = 0,
    centerY = 0,
  ) {
    if (scale <= 0) throw new Error('scale must be positive');
    this.scale = scale;
    this.centerX = centerX;
    this.centerY = centerY;
  }

  worldToScreen(wx: number, wy: number): [number, number] {
    return [
      this.width / 2 + (wx - this.centerX) * this.scale,
      this.height / 2 - (wy - this.centerY) * this.scale,
    ];
  }

  screenToWorld(sx: number, sy: number): [number, number] {
    return [
      this.centerX + (sx - this.width / 2) / this.scale,
      this.centerY - (sy - this.height / 2) / this.scale,
    ];
  }

  panPixels(dx: number, dy: number): void {
    this.centerX -= dx / this.scale;
    this.centerY += dy / this.scale;
  }

  /** Zoom by a factor, keeping the world point under (sx, sy) fixed. */
  zoomAt(sx: number, sy: number, factor: number): void {
    if (factor <= 0) throw new Error('zoom factor must be positive');
    const [wx, wy] = this.screenToWorld(sx, sy);
    this.scale = Math.min(Math.max(this.scale * factor, 1), 1000);
    this.centerX = wx - (sx - this.width / 2) / this.scale;
    this.centerY = wy + (sy - this.height / 2) / this.scale;
  }

  /** Fit a world bounding box with a margin factor. */
  fitBounds(minX: number, maxX: number, minY: number, maxY: number, margin = 1.1): void {
    const spanX = Math.max(maxX - minX, 1e-6) * margin;
    const spanY = Math.max(maxY - minY, 1e-6) * margin;
    this.scale = Math.min(this.width / spanX, this.height / spanY);
    this.centerX = (minX + maxX) / 2;
    this.centerY = (minY + maxY) / 2;
  }
}

/** Rotated-rectangle corners in world coordinates, CCW. */
export function boxCorners(
  cx: number,
  cy: number,
  l: number,
  w: number,
  yaw: number,
): Array<[number, number]> {
  const c = Math.cos(yaw);
  const s = Math.sin(yaw);
  const hl = l / 2;
  const hw = w / 2;
  const local: Array<[number, number]> = [
    [hl, hw],
    [-hl, hw],
    [-hl, -hw],
    [hl, -hw],
  ];
  return local.map(([u, v]) => [cx + c * u - s * v, cy + s * u + c * v]);
}
