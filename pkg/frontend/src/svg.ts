/** Minimal SVG scene building: axes, polylines, shaded bands, legend. */

export interface Extent {
  xMin: number;
  xMax: number;
  yMin: number;
  yMax: number;
}

export interface PlotGeometry {
  width: number;
  height: number;
  margin: { top: number; right: number; bottom: number; left: number };
  extent: Extent;
}

export const DEFAULT_GEOMETRY: Omit<PlotGeometry, "extent"> = {
  width: 720,
  height: 480,
  margin: { top: 40, right: 24, bottom: 48, left: 64 },
};

export function scaleX(g: PlotGeometry, x: number): number {
  const { margin, width, extent } = g;
  const span = extent.xMax - extent.xMin || 1;
  return margin.left + ((x - extent.xMin) / span) * (width - margin.left - margin.right);
}

export function scaleY(g: PlotGeometry, y: number): number {
  const { margin, height, extent } = g;
  const span = extent.yMax - extent.yMin || 1;
  return height - margin.bottom - ((y - extent.yMin) / span) * (height - margin.top - margin.bottom);
}

const fmt = (v: number) => (Math.abs(v) >= 1000 || (v !== 0 && Math.abs(v) < 0.01)
  ? v.toExponential(1) : +v.toFixed(3) + "");

export function polyline(g: PlotGeometry, xs: number[], ys: number[], color: string,
                         dashed: boolean, width = 2): string {
  const pts = xs.map((x, i) => `${scaleX(g, x).toFixed(1)},${scaleY(g, ys[i]).toFixed(1)}`).join(" ");
  const dash = dashed ? ' stroke-dasharray="7 4"' : "";
  return `<polyline fill="none" stroke="${color}" stroke-width="${width}"${dash} points="${pts}"/>`;
}

/** Filled mean+-std band as a closed path. */
export function band(g: PlotGeometry, xs: number[], lo: number[], hi: number[],
                     color: string): string {
  const up = xs.map((x, i) => `${scaleX(g, x).toFixed(1)},${scaleY(g, hi[i]).toFixed(1)}`);
  const dn = xs.map((x, i) => `${scaleX(g, x).toFixed(1)},${scaleY(g, lo[i]).toFixed(1)}`).reverse();
  return `<path fill="${color}" fill-opacity="0.18" stroke="none" d="M${[...up, ...dn].join(" L")} Z" class="std-band"/>`;
}

export function axes(g: PlotGeometry, xLabel: string, yLabel: string, title: string): string {
  const { margin, width, height, extent } = g;
  const parts: string[] = [];
  const x0 = margin.left;
  const x1 = width - margin.right;
  const y0 = height - margin.bottom;
  const y1 = margin.top;
  parts.push(`<line x1="${x0}" y1="${y0}" x2="${x1}" y2="${y0}" stroke="#333"/>`);
  parts.push(`<line x1="${x0}" y1="${y0}" x2="${x0}" y2="${y1}" stroke="#333"/>`);
  const nTicks = 5;
  for (let i = 0; i <= nTicks; i++) {
    const xv = extent.xMin + ((extent.xMax - extent.xMin) * i) / nTicks;
    const yv = extent.yMin + ((extent.yMax - extent.yMin) * i) / nTicks;
    const px = scaleX(g, xv);
    const py = scaleY(g, yv);
    parts.push(`<line x1="${px}" y1="${y0}" x2="${px}" y2="${y0 + 5}" stroke="#333"/>`);
    parts.push(`<text x="${px}" y="${y0 + 20}" font-size="12" text-anchor="middle">${fmt(xv)}</text>`);
    parts.push(`<line x1="${x0 - 5}" y1="${py}" x2="${x0}" y2="${py}" stroke="#333"/>`);
    parts.push(`<text x="${x0 - 8}" y="${py + 4}" font-size="12" text-anchor="end">${fmt(yv)}</text>`);
  }
  parts.push(`<text x="${(x0 + x1) / 2}" y="${height - 10}" font-size="14" text-anchor="middle">${xLabel}</text>`);
  parts.push(`<text x="18" y="${(y0 + y1) / 2}" font-size="14" text-anchor="middle" transform="rotate(-90 18 ${(y0 + y1) / 2})">${yLabel}</text>`);
  parts.push(`<text x="${(x0 + x1) / 2}" y="22" font-size="16" text-anchor="middle" font-weight="bold">${title}</text>`);
  return parts.join("\n");
}

export interface LegendEntry {
  label: string;
  color: string;
  dashed: boolean;
}

export function legend(g: PlotGeometry, entries: LegendEntry[]): string {
  const x = g.width - g.margin.right - 170;
  let y = g.margin.top + 8;
  const parts: string[] = [];
  for (const e of entries) {
    const dash = e.dashed ? ' stroke-dasharray="7 4"' : "";
    parts.push(`<line x1="${x}" y1="${y}" x2="${x + 30}" y2="${y}" stroke="${e.color}" stroke-width="2"${dash}/>`);
    parts.push(`<text x="${x + 36}" y="${y + 4}" font-size="12">${e.label}</text>`);
    y += 18;
  }
  return parts.join("\n");
}

export function document(g: PlotGeometry, body: string): string {
  return `<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="${g.width}" height="${g.height}" viewBox="0 0 ${g.width} ${g.height}">
<rect width="${g.width}" height="${g.height}" fill="white"/>
${body}
</svg>
`;
}
