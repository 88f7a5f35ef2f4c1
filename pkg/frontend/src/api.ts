// Typed client for the review service HTTP API. This module is the only
// coupling between the UI and the Python backend.

export type VerdictValue = 'correct' | 'incorrect' | 'not_applicable';

export const CORE_CONDITIONS = ['caries', 'staining', 'enamel_loss', 'discoloration'] as const;
export type CoreCondition = (typeof CORE_CONDITIONS)[number];

export interface ReviewTask {
  item_id: string;
  dataset_id: string;
  short_caption: string;
  long_caption: string;
  conditions: string[];
  image_url: string;
  ordinal: number;
}

export interface DatasetProgress {
  judged: number;
  pending: number;
  total: number;
}

export interface Progress {
  datasets: Record<string, DatasetProgress>;
  overall: DatasetProgress;
}

export interface TaskEnvelope {
  task: ReviewTask | null;
  progress: Progress;
}

/** Server said no (4xx): the judgment is wrong, not the network. */
export class ApiRejection extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = 'ApiRejection';
  }
}

async function detailOf(res: Response): Promise<string> {
  try {
    const body = (await res.json()) as { detail?: string };
    return body.detail ?? res.statusText;
  } catch {
    return res.statusText;
  }
}

export class ReviewApi {
  constructor(private readonly baseUrl: string = '') {}

  private async checked(res: Response): Promise<Response> {
    if (!res.ok) {
      throw new ApiRejection(res.status, await detailOf(res));
    }
    return res;
  }

  async fetchTask(reviewer: string): Promise<TaskEnvelope> {
    const res = await fetch(`${this.baseUrl}/api/task?reviewer=${encodeURIComponent(reviewer)}`);
    return (await (await this.checked(res)).json()) as TaskEnvelope;
  }

  async submitJudgment(
    reviewer: string,
    itemId: string,
    verdicts: Record<string, VerdictValue>,
  ): Promise<void> {
    const res = await fetch(`${this.baseUrl}/api/judgment`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ reviewer, item_id: itemId, verdicts }),
    });
    await this.checked(res);
  }

  async fetchProgress(reviewer?: string): Promise<Progress> {
    const suffix = reviewer ? `?reviewer=${encodeURIComponent(reviewer)}` : '';
    const res = await fetch(`${this.baseUrl}/api/progress${suffix}`);
    return (await (await this.checked(res)).json()) as Progress;
  }

  async fetchExport(): Promise<string> {
    const res = await fetch(`${this.baseUrl}/api/export`);
    return (await this.checked(res)).text();
  }

  imageUrl(task: ReviewTask): string {
    return `${this.baseUrl}${task.image_url}`;
  }
}
