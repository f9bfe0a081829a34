// DOM console: base image, per-direction sliders, re-seed w2, texture view,
// before/after, bounded history with cached restore, JSON export.

import { ApiError, Client } from "./api";
import type { EditRequest, EditResponse, Info } from "./api";
import { EditScheduler } from "./scheduler";
import {
  DEFAULT_DIRECTIONS,
  HISTORY_LIMIT,
  SessionState,
  activeRequest,
  exportPayload,
  newSession,
  pushHistory,
  requestFor,
  restoreEntry,
  setAlpha,
  reseedW2,
} from "./state";

export interface AppOptions {
  seed1?: number;
  seed2?: number;
  directions?: number;
  debounceMs?: number;
  // injectable for tests; default is a random non-negative 31-bit int
  nextSeed2?: () => number;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  cls?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

function pngSrc(b64: string): string {
  return "data:image/png;base64," + b64;
}

function cacheKey(req: EditRequest): string {
  return `${req.seed1}:${req.seed2}:${req.dir_seed}:${req.alpha}`;
}

export class App {
  root: HTMLElement;
  client: Client;
  opts: Required<Pick<AppOptions, "seed1" | "seed2" | "directions">> &
    AppOptions;
  state!: SessionState;
  info!: Info;

  private scheduler: EditScheduler;
  private editCache = new Map<string, string>(); // request -> png base64
  private baseCache = new Map<string, string>(); // `${seed1}:${seed2}` -> png
  private textureCache = new Map<number, Record<string, string>>(); // by seed1
  private basePng = "";
  private textureOn = false;
  private retryAction: (() => void) | null = null;

  // elements the tests poke at
  banner!: HTMLElement;
  bannerMsg!: HTMLElement;
  retryBtn!: HTMLButtonElement;
  baseImg!: HTMLImageElement;
  beforeImg!: HTMLImageElement;
  afterImg!: HTMLImageElement;
  deltaLabel!: HTMLElement;
  reseedBtn!: HTMLButtonElement;
  textureBtn!: HTMLButtonElement;
  texturePanel!: HTMLElement;
  dirsBox!: HTMLElement;
  historyBox!: HTMLElement;
  exportBtn!: HTMLButtonElement;
  exportLink!: HTMLAnchorElement;
  sliders: HTMLInputElement[] = [];

  constructor(root: HTMLElement, client: Client, opts: AppOptions = {}) {
    this.root = root;
    this.client = client;
    this.opts = {
      seed1: opts.seed1 ?? 1,
      seed2: opts.seed2 ?? 1,
      directions: opts.directions ?? DEFAULT_DIRECTIONS,
      ...opts,
    };
    this.scheduler = new EditScheduler(
      (req) => this.client.edit(req),
      {
        onResult: (dir, req, resp) => this.onEditResult(dir, req, resp),
        onError: (_dir, req, err) =>
          this.showBanner(describe(err), () => this.scheduleEdit(req)),
      },
      opts.debounceMs,
    );
  }

  async init(): Promise<void> {
    this.hideBanner();
    try {
      this.info = await this.client.info();
      const dirs = await this.client.directions(
        this.opts.seed1,
        this.opts.directions,
      );
      this.state = newSession(this.opts.seed1, this.opts.seed2, dirs.dir_seeds);
      this.buildDom();
      await this.refreshBase();
    } catch (err) {
      this.showBanner(describe(err), () => void this.init());
    }
  }

  // ----- DOM skeleton -------------------------------------------------

  private buildDom(): void {
    this.root.textContent = "";

    this.banner = el("div", "banner");
    this.banner.hidden = true;
    this.bannerMsg = el("span", "banner-msg");
    this.retryBtn = el("button", "retry", "retry");
    this.retryBtn.addEventListener("click", () => {
      const act = this.retryAction;
      this.hideBanner();
      act?.();
    });
    this.banner.append(this.bannerMsg, this.retryBtn);

    const header = el("div", "header");
    header.append(
      el(
        "span",
        "title",
        `${this.info.config_id} ${2 ** this.info.n}px  seed1=${this.state.seed1}`,
      ),
    );

    this.baseImg = el("img", "base");
    this.beforeImg = el("img", "before");
    this.afterImg = el("img", "after");
    this.deltaLabel = el("span", "delta");
    const pair = el("div", "pair");
    pair.append(this.beforeImg, this.afterImg, this.deltaLabel);

    this.reseedBtn = el("button", "reseed", "re-seed w2");
    this.reseedBtn.addEventListener("click", () => void this.reseed());

    this.textureBtn = el("button", "texture-toggle", "texture view");
    this.textureBtn.addEventListener("click", () => void this.toggleTexture());
    this.texturePanel = el("div", "texture-panel");
    this.texturePanel.hidden = true;

    this.dirsBox = el("div", "dirs");
    this.sliders = [];
    this.state.dirSeeds.forEach((dirSeed, i) => {
      const row = el("div", "dir-row");
      row.append(el("span", "dir-label", `dir ${dirSeed}`));
      const slider = el("input", "dir-slider");
      slider.type = "range";
      slider.min = "-8";
      slider.max = "8";
      slider.step = "0.1";
      slider.value = "0";
      slider.addEventListener("input", () =>
        this.onSlider(i, Number(slider.value)),
      );
      const val = el("span", "dir-value", "0");
      row.append(slider, val);
      this.sliders.push(slider);
      this.dirsBox.append(row);
    });

    this.historyBox = el("div", "history");

    this.exportBtn = el("button", "export", "export JSON");
    this.exportLink = el("a", "export-link");
    this.exportBtn.addEventListener("click", () => this.triggerExport());

    const controls = el("div", "controls");
    controls.append(this.reseedBtn, this.textureBtn, this.exportBtn);

    this.root.append(
      this.banner,
      header,
      this.baseImg,
      pair,
      controls,
      this.texturePanel,
      this.dirsBox,
      this.historyBox,
      this.exportLink,
    );
  }

  // ----- rendering ----------------------------------------------------

  private async refreshBase(): Promise<void> {
    const key = `${this.state.seed1}:${this.state.seed2}`;
    let png = this.baseCache.get(key);
    if (png === undefined) {
      const resp = await this.client.generate(
        this.state.seed1,
        this.state.seed2,
      );
      png = resp.png_base64;
      this.baseCache.set(key, png);
    }
    this.basePng = png;
    this.baseImg.src = pngSrc(png);
    this.beforeImg.src = pngSrc(png);
    this.showActive();
  }

  // Point the after-image at whatever the active slider stands for.
  private showActive(): void {
    const req = activeRequest(this.state);
    if (req.alpha === 0) {
      this.afterImg.src = pngSrc(this.basePng);
      this.deltaLabel.textContent = "";
      return;
    }
    const cached = this.editCache.get(cacheKey(req));
    if (cached !== undefined) this.afterImg.src = pngSrc(cached);
  }

  private onSlider(dir: number, value: number): void {
    setAlpha(this.state, dir, value);
    const row = this.dirsBox.children[dir];
    const label = row?.querySelector(".dir-value");
    if (label) label.textContent = String(this.state.alphas[dir]);
    const req = requestFor(this.state, dir);
    if (req.alpha === 0) {
      // base image, no server round trip
      this.scheduler.cancel(dir);
      this.showActive();
      return;
    }
    this.showActive(); // cached image right away if we have one
    this.scheduler.schedule(dir, req);
  }

  private scheduleEdit(req: EditRequest): void {
    const dir = this.state.dirSeeds.indexOf(req.dir_seed);
    if (dir >= 0) this.scheduler.schedule(dir, req);
  }

  private onEditResult(dir: number, req: EditRequest, resp: EditResponse): void {
    this.editCache.set(cacheKey(req), resp.png_base64);
    pushHistory(this.state, { request: req, png_base64: resp.png_base64 });
    this.renderHistory();
    if (dir === this.state.active) {
      this.afterImg.src = pngSrc(resp.png_base64);
      this.deltaLabel.textContent = `|dw1| = ${resp.delta_norm.toFixed(3)}`;
    }
  }

  private renderHistory(): void {
    this.historyBox.textContent = "";
    this.state.history.forEach((entry, i) => {
      const thumb = el("img", "thumb");
      thumb.src = pngSrc(entry.png_base64);
      thumb.title =
        `dir ${entry.request.dir_seed} alpha ${entry.request.alpha} ` +
        `w2 ${entry.request.seed2}`;
      thumb.addEventListener("click", () => void this.restore(i));
      this.historyBox.append(thumb);
    });
  }

  private async restore(index: number): Promise<void> {
    const entry = this.state.history[index];
    if (!entry) return;
    restoreEntry(this.state, entry);
    const dir = this.state.active;
    const slider = this.sliders[dir];
    if (slider) slider.value = String(this.state.alphas[dir]);
    // the thumbnail bytes are the render; no network needed for the after
    this.editCache.set(cacheKey(entry.request), entry.png_base64);
    await this.refreshBase(); // cached unless this seed2 never had a base
    this.afterImg.src = pngSrc(entry.png_base64);
  }

  private async reseed(): Promise<void> {
    const next =
      this.opts.nextSeed2 ?? (() => Math.floor(Math.random() * 2 ** 31));
    reseedW2(this.state, next());
    try {
      await this.refreshBase();
    } catch (err) {
      this.showBanner(describe(err), () => void this.reseed());
      return;
    }
    // texture depends only on seed1, so the texture panel stays as-is
    const req = activeRequest(this.state);
    if (req.alpha !== 0) this.scheduler.schedule(this.state.active, req);
  }

  private async toggleTexture(): Promise<void> {
    if (this.textureOn) {
      this.textureOn = false;
      this.texturePanel.hidden = true;
      return;
    }
    let levels = this.textureCache.get(this.state.seed1);
    if (levels === undefined) {
      try {
        const resp = await this.client.texture(this.state.seed1);
        levels = resp.levels;
        this.textureCache.set(this.state.seed1, levels);
      } catch (err) {
        this.showBanner(describe(err), () => void this.toggleTexture());
        return;
      }
    }
    this.texturePanel.textContent = "";
    for (const res of Object.keys(levels).sort((a, b) => +a - +b)) {
      const img = el("img", "texture-level");
      img.src = pngSrc(levels[res]!);
      img.title = `${res}px texture`;
      this.texturePanel.append(img);
    }
    this.textureOn = true;
    this.texturePanel.hidden = false;
  }

  // ----- export and errors -------------------------------------------

  exportJson(): string {
    return JSON.stringify(exportPayload(this.state), null, 2);
  }

  private triggerExport(): void {
    const text = this.exportJson();
    this.exportLink.href =
      "data:application/json;charset=utf-8," + encodeURIComponent(text);
    this.exportLink.download = "edit.json";
    this.exportLink.click();
  }

  showBanner(message: string, retry: (() => void) | null): void {
    this.retryAction = retry;
    if (!this.banner) {
      // failure before the skeleton exists: build a bare banner
      this.banner = el("div", "banner");
      this.bannerMsg = el("span", "banner-msg");
      this.retryBtn = el("button", "retry", "retry");
      this.retryBtn.addEventListener("click", () => {
        const act = this.retryAction;
        this.hideBanner();
        act?.();
      });
      this.banner.append(this.bannerMsg, this.retryBtn);
      this.root.append(this.banner);
    }
    this.bannerMsg.textContent = message;
    this.banner.hidden = false;
  }

  hideBanner(): void {
    if (this.banner) this.banner.hidden = true;
    this.retryAction = null;
  }

  bannerVisible(): boolean {
    return !!this.banner && !this.banner.hidden;
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return `service error: ${err.message}`;
  if (err instanceof Error) return `service unreachable: ${err.message}`;
  return "service unreachable";
}

export async function createApp(
  root: HTMLElement,
  client: Client,
  opts: AppOptions = {},
): Promise<App> {
  const app = new App(root, client, opts);
  await app.init();
  return app;
}
