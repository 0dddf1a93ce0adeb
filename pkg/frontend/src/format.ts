/**
 * Display formatting. Numbers pass through untouched (String of the JSON
 * value) so what the user reads is exactly what the service returned.
 */

import type { IndicatorValues } from "./api.js";

export const INDICATORS: (keyof IndicatorValues)[] = ["carbon", "population", "gdp"];

export const INDICATOR_UNITS: Record<keyof IndicatorValues, string> = {
  carbon: "tons",
  population: "people",
  gdp: "currency units",
};

export function formatIndicator(name: keyof IndicatorValues, value: number): string {
  return `${String(value)} ${INDICATOR_UNITS[name]}`;
}

export function formatCoverage(fraction: number): string {
  return `${(fraction * 100).toFixed(1)}%`;
}

/** Linear blue-to-red choropleth color over [min, max]. */
export function choroplethColor(value: number, min: number, max: number): string {
  const t = max > min ? (value - min) / (max - min) : 0.5;
  const r = Math.round(40 + t * 200);
  const g = Math.round(70 + (1 - Math.abs(t - 0.5) * 2) * 90);
  const b = Math.round(240 - t * 200);
  return `rgb(${r}, ${g}, ${b})`;
}
