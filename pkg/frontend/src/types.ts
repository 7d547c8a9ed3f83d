export type Verdict = "mf" | "not_mf" | "uncertain";

export interface MaskPayload {
  width: number;
  height: number;
  runs: number[];
}

export interface TaskView {
  task_id: string;
  status: string;
  score: number;
  image_url: string;
  grid: { width: number; height: number; mpp: number };
  mask: MaskPayload;
  my_verdict: Verdict | null;
}

export interface Stats {
  n_tasks: number;
  by_status: Record<string, number>;
  per_annotator: Record<string, number>;
  escalation_rate: number | null;
  dispute_rate: number | null;
}

export interface SubmitResult {
  task_id: string;
  status: string;
  // true when the server already had this verdict (idempotent retry)
  alreadyRecorded: boolean;
}
