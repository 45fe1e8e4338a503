/** Small DOM helpers (no framework). */

const SVG_NS = "http://www.w3.org/2000/svg";

export function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

export function svgEl(tag: string, attrs: Record<string, string> = {}): SVGElement {
  const node = document.createElementNS(SVG_NS, tag) as SVGElement;
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  return node;
}

export function clear(node: Element): void {
  while (node.firstChild) node.removeChild(node.firstChild);
}

/** Perceptual-ish blue-to-red gradient for normalized time. */
export function timeColor(t: number): string {
  const u = Math.min(1, Math.max(0, t));
  const r = Math.round(40 + 215 * u);
  const g = Math.round(80 + 60 * Math.sin(Math.PI * u));
  const b = Math.round(255 - 215 * u);
  return `rgb(${r},${g},${b})`;
}

const MEMBER_COLORS = [
  "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
  "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
];

export function memberColor(index: number): string {
  return MEMBER_COLORS[index % MEMBER_COLORS.length]!;
}
