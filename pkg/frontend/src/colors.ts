/** Display conventions: green car, cyan pedestrian, yellow cyclist boxes;
 * red positive clicks, blue negative clicks; height-colored points. */

export const CLASS_COLORS: Record<number, string> = {
  1: '#2ecc40', // car: green
  2: '#00e5e5', // pedestrian: cyan
  3: '#ffdc00', // cyclist: yellow
};

export const FALLBACK_CLASS_COLOR = '#ff7f50';
export const POSITIVE_CLICK_COLOR = '#ff3030';
export const NEGATIVE_CLICK_COLOR = '#3060ff';
export const GT_COLOR = '#777777';

export function classColor(classId: number): string {
  return CLASS_COLORS[classId] ?? FALLBACK_CLASS_COLOR;
}

/** Height colormap: dark blue near the ground fading to warm white. */
export function heightColor(z: number, zMin: number, zMax: number): string {
  const span = Math.max(zMax - zMin, 1e-6);
  const t = Math.min(Math.max((z - zMin) / span, 0), 1);
  const r = Math.round(40 + 215 * t);
  const g = Math.round(70 + 150 * t);
  const b = Math.round(140 + 80 * (1 - t) + 35 * t);
  return `rgb(${r},${g},${b})`;
}

/** Correlation overlay color: [-1, 1] rescaled to [0, 1] for display. */
export function heatColor(value: number): string {
  const t = Math.min(Math.max((value + 1) / 2, 0), 1);
  const r = Math.round(255 * t);
  const b = Math.round(255 * (1 - t));
  const g = Math.round(80 * (1 - Math.abs(2 * t - 1)));
  return `rgb(${r},${g},${b})`;
}
