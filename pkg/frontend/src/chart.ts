/**
 * Line-series layout for the history panel: maps readings to SVG polyline
 * points. Pure geometry; the renderer just writes the strings into the DOM.
 */

import type { MeasurementField, Reading } from "./api.js";

export interface SeriesModel {
  field: MeasurementField;
  color: string;
  /** "x,y x,y ..." in viewbox coordinates, one vertex per reading. */
  points: string;
  visible: boolean;
}

export interface ChartModel {
  width: number;
  height: number;
  series: SeriesModel[];
  /** Rendered y-axis labels [min, max] per visible extent. */
  yLabels: [string, string] | null;
  empty: boolean;
}

export const SERIES_COLORS: Record<MeasurementField, string> = {
  temperature: "#e4572e",
  humidity: "#17bebb",
  co2: "#76b041",
  pm1_0: "#b8b8d1",
  pm2_5: "#ffc914",
  pm10: "#2e282a",
};

const PAD = 6;

export function buildChartModel(
  readings: Reading[],
  selected: Set<MeasurementField>,
  width = 640,
  height = 220,
): ChartModel {
  const visible = [...selected];
  if (readings.length === 0 || visible.length === 0) {
    return { width, height, series: [], yLabels: null, empty: true };
  }
  const times = readings.map((r) => Date.parse(r.captured_at));
  const tMin = Math.min(...times);
  const tMax = Math.max(...times);
  const values = readings.flatMap((r) => visible.map((f) => r[f]));
  const vMin = Math.min(...values);
  const vMax = Math.max(...values);

  const x = (t: number): number =>
    tMax === tMin ? width / 2 : PAD + ((t - tMin) / (tMax - tMin)) * (width - 2 * PAD);
  const y = (v: number): number =>
    vMax === vMin
      ? height / 2
      : height - PAD - ((v - vMin) / (vMax - vMin)) * (height - 2 * PAD);

  const series = visible.map((field) => ({
    field,
    color: SERIES_COLORS[field],
    points: readings
      .map((r, i) => `${round2(x(times[i]))},${round2(y(r[field]))}`)
      .join(" "),
    visible: true,
  }));
  return {
    width,
    height,
    series,
    yLabels: [String(vMin), String(vMax)],
    empty: false,
  };
}

function round2(n: number): number {
  return Math.round(n * 100) / 100;
}
