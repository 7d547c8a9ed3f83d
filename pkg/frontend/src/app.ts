/**
 * Keyboard-first single-task review flow.
 *
 * One candidate crop at a time, rendered at 1:1 and 2x with an optional
 * mask outline (off by default so the first look is unbiased morphology).
 * Keys: 1 = MF, 2 = not MF, 3 = uncertain, M = outline toggle. Verdicts
 * auto-advance; failed submissions queue and retry without blocking.
 */

import { ApiClient, ApiError } from "./api.js";
import { decodeMask, maskOutline, type Loop } from "./rle.js";
import type { Stats, TaskView, Verdict } from "./types.js";

export type KeyAction =
  | { kind: "verdict"; verdict: Verdict }
  | { kind: "toggle-outline" }
  | null;

export function actionForKey(key: string): KeyAction {
  switch (key) {
    case "1":
      return { kind: "verdict", verdict: "mf" };
    case "2":
      return { kind: "verdict", verdict: "not_mf" };
    case "3":
      return { kind: "verdict", verdict: "uncertain" };
    case "m":
    case "M":
      return { kind: "toggle-outline" };
    default:
      return null;
  }
}

export function statsLines(stats: Stats): string[] {
  const lines: string[] = [`tasks: ${stats.n_tasks}`];
  const done =
    (stats.by_status["resolved"] ?? 0) + (stats.by_status["disputed"] ?? 0);
  const pending = stats.by_status["pending"] ?? 0;
  const escalated = stats.by_status["escalated"] ?? 0;
  lines.push(`done: ${done}  pending: ${pending}  escalated: ${escalated}`);
  for (const [annotator, count] of Object.entries(stats.per_annotator).sort()) {
    lines.push(`${annotator}: ${count} verdicts`);
  }
  if (stats.escalation_rate !== null) {
    lines.push(`escalation rate: ${(stats.escalation_rate * 100).toFixed(1)}%`);
  }
  if (stats.dispute_rate !== null) {
    lines.push(`dispute rate: ${(stats.dispute_rate * 100).toFixed(1)}%`);
  }
  if (stats.escalation_rate === null) {
    lines.push("no tasks yet");
  }
  return lines;
}

function drawOutline(
  ctx: CanvasRenderingContext2D,
  loops: Loop[],
  scale: number,
) {
  ctx.save();
  ctx.strokeStyle = "#27e02c";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  for (const loop of loops) {
    loop.forEach(([x, y], index) => {
      if (index === 0) ctx.moveTo(x * scale, y * scale);
      else ctx.lineTo(x * scale, y * scale);
    });
  }
  ctx.stroke();
  ctx.restore();
}

export class App {
  private task: TaskView | null = null;
  private outlineOn = false; // unbiased first look; M to verify the object
  private loops: Loop[] = [];
  private image: HTMLImageElement | null = null;

  constructor(
    private doc: Document,
    private client: ApiClient,
  ) {
    client.onQueueChange = (pending, offline) => this.renderBanner(pending, offline);
  }

  private el<T extends HTMLElement>(id: string): T {
    const node = this.doc.getElementById(id);
    if (!node) throw new Error(`missing element #${id}`);
    return node as T;
  }

  async start(): Promise<void> {
    this.doc.addEventListener("keydown", (event) => {
      void this.handleKey((event as KeyboardEvent).key);
    });
    await this.refreshStats();
    await this.loadNext();
  }

  async handleKey(key: string): Promise<void> {
    const action = actionForKey(key);
    if (!action) return;
    if (action.kind === "toggle-outline") {
      this.outlineOn = !this.outlineOn;
      this.renderTask();
      return;
    }
    await this.submit(action.verdict);
  }

  async submit(verdict: Verdict): Promise<void> {
    if (!this.task) return;
    const task = this.task;
    this.setNotice(verdict === "uncertain" ? "escalated for senior review" : "saving…");
    this.setButtonsEnabled(false);
    try {
      const result = await this.client.submitLabel(task.task_id, verdict);
      if (result.status === "escalated") {
        this.setNotice("escalated for senior review");
      } else if (result.alreadyRecorded) {
        this.setNotice("already recorded; skipping");
      } else {
        this.setNotice(`recorded: ${verdict}`);
      }
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        this.setNotice("task already handled; skipping");
      } else {
        this.setNotice(`submission failed: ${String(error)}`);
      }
    }
    await this.refreshStats();
    await this.loadNext();
  }

  async loadNext(): Promise<void> {
    this.task = await this.client.nextTask();
    this.outlineOn = false;
    if (!this.task) {
      this.el("viewer").hidden = true;
      this.el("empty").hidden = false;
      return;
    }
    this.el("viewer").hidden = false;
    this.el("empty").hidden = true;
    const mask = decodeMask(this.task.mask);
    this.loops = maskOutline(mask, this.task.mask.width, this.task.mask.height);
    this.image = new Image();
    this.image.src = this.task.image_url;
    await new Promise((resolve, reject) => {
      this.image!.onload = resolve;
      this.image!.onerror = reject;
    });
    this.setButtonsEnabled(true);
    this.renderTask();
  }

  private renderTask(): void {
    const task = this.task;
    if (!task || !this.image) return;
    this.el("task-id").textContent = task.task_id;
    this.el("score").textContent = `detector score ${task.score.toFixed(2)}`;
    for (const [canvasId, scale] of [
      ["canvas-1x", 1],
      ["canvas-2x", 2],
    ] as const) {
      const canvas = this.el<HTMLCanvasElement>(canvasId);
      canvas.width = task.grid.width * scale;
      canvas.height = task.grid.height * scale;
      const ctx = canvas.getContext("2d")!;
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(this.image, 0, 0, canvas.width, canvas.height);
      if (this.outlineOn) drawOutline(ctx, this.loops, scale);
    }
    this.el("outline-state").textContent = this.outlineOn
      ? "outline ON (M to hide)"
      : "outline off (M to show)";
  }

  private setButtonsEnabled(enabled: boolean): void {
    for (const id of ["btn-mf", "btn-not-mf", "btn-uncertain"]) {
      this.el<HTMLButtonElement>(id).disabled = !enabled;
    }
  }

  private setNotice(text: string): void {
    this.el("notice").textContent = text;
  }

  private renderBanner(pending: number, offline: boolean): void {
    const banner = this.el("banner");
    if (pending > 0 && offline) {
      banner.hidden = false;
      banner.textContent = `connection trouble: ${pending} verdict(s) queued, retrying…`;
    } else {
      banner.hidden = true;
    }
  }

  async refreshStats(): Promise<void> {
    try {
      const stats = await this.client.getStats();
      this.el("stats").textContent = statsLines(stats).join("\n");
    } catch {
      // stats are best-effort; never block labelling on them
    }
  }
}

export function boot(doc: Document): void {
  const params = new URLSearchParams(doc.defaultView!.location.search);
  const annotator = params.get("annotator") ?? "";
  if (!annotator) {
    doc.getElementById("empty")!.textContent =
      "add ?annotator=YOUR_ID to the URL to start reviewing";
    return;
  }
  const client = new ApiClient("", annotator);
  const app = new App(doc, client);
  doc.getElementById("btn-mf")!.addEventListener("click", () => void app.submit("mf"));
  doc
    .getElementById("btn-not-mf")!
    .addEventListener("click", () => void app.submit("not_mf"));
  doc
    .getElementById("btn-uncertain")!
    .addEventListener("click", () => void app.submit("uncertain"));
  void app.start();
}
