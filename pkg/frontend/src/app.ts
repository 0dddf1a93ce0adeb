/**
 * Interactive region explorer: a clickable choropleth grid, a detail panel
 * with caption/indicators/similar regions, and a search box. The client does
 * no inference; a debug pane shows the raw service JSON for every value on
 * screen.
 */

import {
  ApiClient,
  RegionDetail,
  RegionSummary,
  ServiceError,
  SimilarEntry,
} from "./api.js";
import { decodeImgf32, drawToCanvas } from "./imgf32.js";
import {
  INDICATORS,
  choroplethColor,
  formatCoverage,
  formatIndicator,
} from "./format.js";
import type { IndicatorValues } from "./api.js";

export interface AppOptions {
  baseUrl: string;
  fetchFn?: typeof fetch;
  similarCount?: number;
}

export class ExplorerApp {
  readonly client: ApiClient;
  readonly root: HTMLElement;
  private readonly similarCount: number;

  private regions: RegionSummary[] = [];
  private gridShape: [number, number] = [0, 0];
  private indicator: keyof IndicatorValues = "carbon";
  private currentCity = "";
  private panelToken = 0;
  private lastAction: () => Promise<void> = async () => {};

  banner!: HTMLElement;
  citySelect!: HTMLSelectElement;
  indicatorSelect!: HTMLSelectElement;
  searchBox!: HTMLInputElement;
  searchMessage!: HTMLElement;
  gridEl!: HTMLElement;
  panelEl!: HTMLElement;

  constructor(root: HTMLElement, options: AppOptions) {
    this.root = root;
    this.client = new ApiClient(options.baseUrl, options.fetchFn ?? fetch.bind(globalThis));
    this.similarCount = options.similarCount ?? 5;
    this.buildSkeleton();
  }

  private buildSkeleton(): void {
    this.root.innerHTML = "";
    this.banner = el("div", "error-banner hidden");
    const retry = el("button", "retry") as HTMLButtonElement;
    retry.textContent = "retry";
    retry.addEventListener("click", () => void this.retry());
    this.banner.append(el("span", "error-text"), retry);

    const controls = el("div", "controls");
    this.citySelect = el("select", "city-select") as HTMLSelectElement;
    this.citySelect.addEventListener("change", () => void this.loadCity(this.citySelect.value));
    this.indicatorSelect = el("select", "indicator-select") as HTMLSelectElement;
    for (const name of INDICATORS) {
      const option = document.createElement("option");
      option.value = name;
      option.textContent = name;
      this.indicatorSelect.append(option);
    }
    this.indicatorSelect.addEventListener("change", () => {
      this.indicator = this.indicatorSelect.value as keyof IndicatorValues;
      this.reshadeGrid(); // cached values only; no refetch
    });
    this.searchBox = el("input", "search-box") as HTMLInputElement;
    this.searchBox.placeholder = "region id or row,col";
    this.searchBox.addEventListener("keydown", (event) => {
      if ((event as KeyboardEvent).key === "Enter") {
        void this.search(this.searchBox.value.trim());
      }
    });
    this.searchMessage = el("span", "search-message");
    controls.append(this.citySelect, this.indicatorSelect, this.searchBox, this.searchMessage);

    this.gridEl = el("div", "grid");
    this.panelEl = el("aside", "panel");
    this.panelEl.textContent = "Click a region to inspect it.";
    const main = el("div", "layout");
    main.append(this.gridEl, this.panelEl);
    this.root.append(this.banner, controls, main);
  }

  async init(): Promise<void> {
    this.lastAction = () => this.init();
    await this.guard(async () => {
      const cities = await this.client.cities();
      this.citySelect.innerHTML = "";
      for (const city of cities) {
        const option = document.createElement("option");
        option.value = city.name;
        option.textContent = `${city.name} (${city.n_regions})`;
        this.citySelect.append(option);
      }
      if (cities.length) {
        await this.loadCity(cities[0].name);
      }
    });
  }

  async loadCity(city: string): Promise<void> {
    this.lastAction = () => this.loadCity(city);
    await this.guard(async () => {
      this.regions = await this.client.regions(city);
      this.currentCity = city;
      this.citySelect.value = city;
      const rows = Math.max(...this.regions.map((r) => r.grid_ij[0])) + 1;
      const cols = Math.max(...this.regions.map((r) => r.grid_ij[1])) + 1;
      this.gridShape = [rows, cols];
      this.renderGrid();
    });
  }

  private renderGrid(): void {
    this.gridEl.innerHTML = "";
    this.gridEl.style.display = "grid";
    this.gridEl.style.gridTemplateColumns = `repeat(${this.gridShape[1]}, 1fr)`;
    for (const region of this.regions) {
      const cell = el("button", "cell") as HTMLButtonElement;
      cell.dataset.regionId = region.region_id;
      cell.title = region.region_id;
      cell.addEventListener("click", () => void this.selectRegion(region.region_id));
      this.gridEl.append(cell);
    }
    this.reshadeGrid();
  }

  reshadeGrid(): void {
    const values = this.regions.map((r) => r.indicators_predicted[this.indicator]);
    const min = Math.min(...values);
    const max = Math.max(...values);
    const cells = this.gridEl.querySelectorAll<HTMLElement>(".cell");
    cells.forEach((cell, i) => {
      cell.style.backgroundColor = choroplethColor(values[i], min, max);
    });
  }

  async search(query: string): Promise<void> {
    this.searchMessage.textContent = "";
    if (!query) {
      return;
    }
    let target = this.regions.find((r) => r.region_id === query);
    const coords = query.split(",").map((s) => Number.parseInt(s.trim(), 10));
    if (!target && coords.length === 2 && coords.every(Number.isFinite)) {
      target = this.regions.find(
        (r) => r.grid_ij[0] === coords[0] && r.grid_ij[1] === coords[1],
      );
    }
    if (!target) {
      this.searchMessage.textContent = `not found: ${query}`;
      return;
    }
    await this.selectRegion(target.region_id);
  }

  async selectRegion(regionId: string): Promise<void> {
    this.lastAction = () => this.selectRegion(regionId);
    const token = ++this.panelToken;
    await this.guard(async () => {
      const [detail, similar, image] = await Promise.all([
        this.client.region(regionId),
        this.client.similar(regionId, this.similarCount),
        this.client.regionImage(regionId).catch(() => null),
      ]);
      if (token !== this.panelToken) {
        return; // a newer selection already landed
      }
      this.renderPanel(detail, similar, image);
    });
  }

  private renderPanel(
    detail: RegionDetail,
    similar: SimilarEntry[],
    image: ArrayBuffer | null,
  ): void {
    this.panelEl.innerHTML = "";
    const title = el("h2", "panel-title");
    title.textContent = `${detail.region_id} [${detail.grid_ij.join(", ")}]`;
    this.panelEl.append(title);

    if (image) {
      const canvas = document.createElement("canvas");
      canvas.className = "thumbnail";
      try {
        drawToCanvas(decodeImgf32(image), canvas);
      } catch {
        // leave a blank canvas on malformed payloads
      }
      this.panelEl.append(canvas);
    }

    const caption = el("p", "caption");
    caption.textContent = detail.caption;
    this.panelEl.append(caption);

    const list = el("dl", "indicators");
    for (const name of INDICATORS) {
      const term = el("dt", `indicator-name indicator-${name}`);
      term.textContent = name;
      const value = el("dd", `indicator-value indicator-${name}-value`);
      value.textContent = formatIndicator(name, detail.indicators_predicted[name]);
      list.append(term, value);
      if (detail.indicators_true) {
        const truth = el("dd", `indicator-true indicator-${name}-true`);
        truth.textContent = `true: ${formatIndicator(name, detail.indicators_true[name])}`;
        list.append(truth);
      }
    }
    this.panelEl.append(list);

    if (detail.scene) {
      const scene = el("p", "scene-summary");
      const cov = detail.scene.coverage;
      scene.textContent =
        `features: ${detail.scene.building_count} buildings, ${detail.scene.road_count} roads, ` +
        `${detail.scene.green_blob_count} green areas, ${detail.scene.water_blob_count} water bodies; ` +
        `coverage b=${formatCoverage(cov.b)} r=${formatCoverage(cov.r)} ` +
        `g=${formatCoverage(cov.g)} w=${formatCoverage(cov.w)}`;
      this.panelEl.append(scene);
    }

    const similarHeader = el("h3", "similar-header");
    similarHeader.textContent = "similar regions";
    const similarList = el("ul", "similar-list");
    for (const entry of similar) {
      const item = el("li", "similar-entry");
      const link = el("button", "similar-link") as HTMLButtonElement;
      link.dataset.regionId = entry.region_id;
      link.textContent = `${entry.region_id} (cos ${entry.cosine.toFixed(4)})`;
      link.addEventListener("click", () => void this.selectRegion(entry.region_id));
      item.append(link);
      similarList.append(item);
    }
    this.panelEl.append(similarHeader, similarList);

    const debug = document.createElement("details");
    debug.className = "debug-pane";
    const summary = document.createElement("summary");
    summary.textContent = "raw service response";
    const pre = el("pre", "debug-json");
    pre.textContent = JSON.stringify({ region: detail, similar }, null, 2);
    debug.append(summary, pre);
    this.panelEl.append(debug);
  }

  private async guard(action: () => Promise<void>): Promise<void> {
    try {
      await action();
      this.hideBanner();
    } catch (err) {
      if (err instanceof ServiceError) {
        this.showBanner(err.message);
        return;
      }
      throw err;
    }
  }

  private async retry(): Promise<void> {
    await this.lastAction();
  }

  private showBanner(message: string): void {
    this.banner.classList.remove("hidden");
    const text = this.banner.querySelector(".error-text");
    if (text) {
      text.textContent = `service error: ${message}`;
    }
  }

  private hideBanner(): void {
    this.banner.classList.add("hidden");
  }
}

function el(tag: string, className: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  return node;
}
