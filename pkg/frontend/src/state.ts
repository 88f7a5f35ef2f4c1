// Review session state machine. All judgment state is server-authoritative;
// this class only tracks the task in hand, the reviewer's selections, and a
// local queue for judgments that could not reach the server.

import {
  ApiRejection,
  CORE_CONDITIONS,
  Progress,
  ReviewApi,
  ReviewTask,
  VerdictValue,
} from './api.js';

export type Phase = 'idle' | 'loading' | 'reviewing' | 'submitting' | 'done' | 'error';

export type SubmitOutcome = 'ok' | 'rejected' | 'queued' | 'ignored';

export const VERDICT_CYCLE: VerdictValue[] = ['correct', 'incorrect', 'not_applicable'];

export interface QueuedJudgment {
  itemId: string;
  verdicts: Record<string, VerdictValue>;
}

function defaultVerdicts(): Record<string, VerdictValue> {
  const verdicts: Record<string, VerdictValue> = {};
  for (const condition of CORE_CONDITIONS) {
    verdicts[condition] = 'not_applicable';
  }
  return verdicts;
}

function isNetworkError(err: unknown): boolean {
  return !(err instanceof ApiRejection);
}

export class ReviewSession {
  phase: Phase = 'idle';
  task: ReviewTask | null = null;
  verdicts: Record<string, VerdictValue> = defaultVerdicts();
  touched = new Set<string>();
  progress: Progress | null = null;
  submitted = 0;
  unsent: QueuedJudgment[] = [];
  lastError: string | null = null;
  private inFlight = false;

  constructor(
    private readonly api: ReviewApi,
    readonly reviewer: string,
  ) {}

  /** Fetch the next pending task; lands in 'reviewing', 'done' or 'error'. */
  async loadNext(): Promise<void> {
    this.phase = 'loading';
    this.lastError = null;
    try {
      const envelope = await this.api.fetchTask(this.reviewer);
      this.progress = envelope.progress;
      if (!envelope.task) {
        this.task = null;
        this.phase = 'done';
        return;
      }
      this.task = envelope.task;
      this.verdicts = defaultVerdicts();
      this.touched.clear();
      this.phase = 'reviewing';
    } catch (err) {
      this.phase = 'error';
      this.lastError = err instanceof Error ? err.message : String(err);
    }
  }

  /** Explicit reviewer choice; required before submit becomes available. */
  setVerdict(condition: string, value: VerdictValue): void {
    if (this.phase !== 'reviewing') {
      return;
    }
    this.verdicts[condition] = value;
    this.touched.add(condition);
  }

  /** Keyboard helper: advance the condition's verdict through the cycle. */
  cycleVerdict(condition: string): VerdictValue {
    const current = this.verdicts[condition] ?? 'not_applicable';
    const next = VERDICT_CYCLE[(VERDICT_CYCLE.indexOf(current) + 1) % VERDICT_CYCLE.length];
    this.setVerdict(condition, next);
    return next;
  }

  /** Enabled only after at least one explicit verdict, and never while a
   * submission is in flight (double-clicks submit exactly once). */
  canSubmit(): boolean {
    return this.phase === 'reviewing' && this.touched.size >= 1 && !this.inFlight;
  }

  async submit(): Promise<SubmitOutcome> {
    if (!this.canSubmit() || !this.task) {
      return 'ignored';
    }
    this.inFlight = true;
    this.phase = 'submitting';
    const judgment: QueuedJudgment = { itemId: this.task.item_id, verdicts: { ...this.verdicts } };
    try {
      await this.api.submitJudgment(this.reviewer, judgment.itemId, judgment.verdicts);
      this.inFlight = false;
      this.submitted += 1;
      await this.loadNext();
      return 'ok';
    } catch (err) {
      this.inFlight = false;
      if (err instanceof ApiRejection) {
        // field-level problem: stay on the task, keep every selection
        this.phase = 'reviewing';
        this.lastError = err.detail;
        return 'rejected';
      }
      // network trouble: queue locally and try to move on
      this.unsent.push(judgment);
      this.lastError = 'network failure: judgment queued locally';
      await this.loadNext();
      return 'queued';
    }
  }

  /** Flush the local queue; returns how many judgments reached the server. */
  async retryUnsent(): Promise<number> {
    let sent = 0;
    const remaining: QueuedJudgment[] = [];
    for (const judgment of this.unsent) {
      try {
        await this.api.submitJudgment(this.reviewer, judgment.itemId, judgment.verdicts);
        this.submitted += 1;
        sent += 1;
      } catch (err) {
        if (isNetworkError(err)) {
          remaining.push(judgment);
        }
        // rejected queued judgments are dropped: the server refused them
      }
    }
    this.unsent = remaining;
    return sent;
  }
}
