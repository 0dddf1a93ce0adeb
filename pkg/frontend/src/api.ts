/**
 * Typed client for the region-profiling service. The explorer never computes
 * anything itself: every displayed value is passed through from these
 * responses.
 */

export interface CityInfo {
  name: string;
  n_regions: number;
  grid_rows: number;
  grid_cols: number;
}

export interface IndicatorValues {
  carbon: number;
  population: number;
  gdp: number;
}

export interface RegionSummary {
  region_id: string;
  grid_ij: [number, number];
  indicators_predicted: IndicatorValues;
  indicators_true: IndicatorValues | null;
}

export interface SceneSummary {
  seed: number;
  building_count: number;
  road_count: number;
  green_blob_count: number;
  water_blob_count: number;
  coverage: { b: number; r: number; g: number; w: number };
}

export interface RegionDetail {
  region_id: string;
  city: string;
  grid_ij: [number, number];
  indicators_predicted: IndicatorValues;
  indicators_predicted_log: IndicatorValues;
  indicators_true: IndicatorValues | null;
  caption: string;
  scene: SceneSummary | null;
}

export interface SimilarEntry {
  region_id: string;
  cosine: number;
}

export class ServiceError extends Error {
  constructor(message: string, readonly status?: number) {
    super(message);
  }
}

export class ApiClient {
  constructor(readonly baseUrl: string, readonly fetchFn: typeof fetch = fetch) {}

  private async getJson<T>(path: string): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.baseUrl}${path}`);
    } catch (err) {
      throw new ServiceError(`service unreachable: ${String(err)}`);
    }
    const body = await response.json().catch(() => ({}));
    if (!response.ok) {
      const message = (body as { error?: string }).error ?? response.statusText;
      throw new ServiceError(message, response.status);
    }
    return body as T;
  }

  async cities(): Promise<CityInfo[]> {
    const data = await this.getJson<{ cities: CityInfo[] }>("/cities");
    return data.cities;
  }

  async regions(city: string): Promise<RegionSummary[]> {
    const data = await this.getJson<{ regions: RegionSummary[] }>(
      `/regions?city=${encodeURIComponent(city)}`,
    );
    return data.regions;
  }

  region(regionId: string): Promise<RegionDetail> {
    return this.getJson<RegionDetail>(`/region/${encodeURIComponent(regionId)}`);
  }

  async similar(regionId: string, k: number): Promise<SimilarEntry[]> {
    const data = await this.getJson<{ results: SimilarEntry[] }>(
      `/region/${encodeURIComponent(regionId)}/similar?k=${k}`,
    );
    return data.results;
  }

  async regionImage(regionId: string): Promise<ArrayBuffer> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.baseUrl}/region/${encodeURIComponent(regionId)}/image`);
    } catch (err) {
      throw new ServiceError(`service unreachable: ${String(err)}`);
    }
    if (!response.ok) {
      throw new ServiceError(`image fetch failed (${response.status})`, response.status);
    }
    return response.arrayBuffer();
  }
}
