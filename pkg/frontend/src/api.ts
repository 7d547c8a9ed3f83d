/**
 * Review API client with an ordered offline submission queue.
 *
 * Exactly one submission is in flight at a time; failed submissions are
 * retried in order, so verdicts reach the server in the order they were
 * given. A 409 duplicate from the server means a retried request had in
 * fact been delivered: the client treats that as success, which makes
 * retry-after-network-drop idempotent.
 */

import type { Stats, SubmitResult, TaskView, Verdict } from "./types.js";

export type FetchFn = typeof fetch;

interface QueuedSubmission {
  taskId: string;
  verdict: Verdict;
  note: string | null;
  resolve: (result: SubmitResult) => void;
  reject: (error: unknown) => void;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class ApiClient {
  private queue: QueuedSubmission[] = [];
  private flushing = false;
  public onQueueChange: ((pending: number, offline: boolean) => void) | null = null;

  constructor(
    private baseUrl: string,
    private annotator: string,
    private fetchFn: FetchFn = fetch,
    private retryDelayMs = 500,
    private maxAttempts = 20,
  ) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async nextTask(): Promise<TaskView | null> {
    const response = await this.fetchFn(
      this.url(`/api/tasks/next?annotator=${encodeURIComponent(this.annotator)}`),
    );
    if (!response.ok) throw new ApiError(response.status, await response.text());
    const body = await response.json();
    return body.task;
  }

  async getTask(taskId: string): Promise<TaskView> {
    const response = await this.fetchFn(
      this.url(`/api/tasks/${taskId}?annotator=${encodeURIComponent(this.annotator)}`),
    );
    if (!response.ok) throw new ApiError(response.status, await response.text());
    return response.json();
  }

  async getStats(): Promise<Stats> {
    const response = await this.fetchFn(this.url("/api/stats"));
    if (!response.ok) throw new ApiError(response.status, await response.text());
    return response.json();
  }

  async exportText(): Promise<string> {
    const response = await this.fetchFn(this.url("/api/export"));
    if (!response.ok) throw new ApiError(response.status, await response.text());
    return response.text();
  }

  pending(): number {
    return this.queue.length;
  }

  /** Queue a verdict; resolves when the server has recorded it. */
  submitLabel(taskId: string, verdict: Verdict, note: string | null = null): Promise<SubmitResult> {
    return new Promise((resolve, reject) => {
      this.queue.push({ taskId, verdict, note, resolve, reject });
      this.notify(false);
      void this.flush();
    });
  }

  private notify(offline: boolean) {
    this.onQueueChange?.(this.queue.length, offline);
  }

  private async post(item: QueuedSubmission): Promise<SubmitResult> {
    const response = await this.fetchFn(this.url(`/api/tasks/${item.taskId}/labels`), {
      method: "POST",
      headers: {
        "Content-Type": "application/json",
        "X-Annotator": this.annotator,
      },
      body: JSON.stringify({ verdict: item.verdict, note: item.note }),
    });
    if (response.status === 409 && response.headers.get("X-Conflict") === "duplicate") {
      // the earlier attempt made it through before the connection dropped
      return { task_id: item.taskId, status: "recorded", alreadyRecorded: true };
    }
    if (!response.ok) throw new ApiError(response.status, await response.text());
    const body = await response.json();
    return { task_id: body.task_id, status: body.status, alreadyRecorded: false };
  }

  async flush(): Promise<void> {
    if (this.flushing) return;
    this.flushing = true;
    try {
      while (this.queue.length > 0) {
        const item = this.queue[0];
        let attempts = 0;
        for (;;) {
          try {
            const result = await this.post(item);
            this.queue.shift();
            this.notify(false);
            item.resolve(result);
            break;
          } catch (error) {
            if (error instanceof ApiError) {
              // a definitive server answer: do not retry
              this.queue.shift();
              this.notify(false);
              item.reject(error);
              break;
            }
            attempts += 1;
            this.notify(true);
            if (attempts >= this.maxAttempts) {
              this.queue.shift();
              this.notify(false);
              item.reject(error);
              break;
            }
            await new Promise((r) => setTimeout(r, this.retryDelayMs));
          }
        }
      }
    } finally {
      this.flushing = false;
    }
  }
}
