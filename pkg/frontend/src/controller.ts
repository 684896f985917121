// Session state machine: fetch a batch, collect ratings, submit, advance.
// DOM-free; the view layer re-renders on every onChange tick. At most one
// submission is in flight, rejections keep the entered ratings, and network
// failures surface a retry without losing state.

import { ApiError } from './api.js';
import type { Progress, SubmitReply } from './api.js';
import {
  BatchPayload,
  BatchView,
  Submission,
  canSubmit,
  makeView,
  markLoadFailed,
  setRating,
  toSubmission,
} from './state.js';

export interface SessionDeps {
  fetchBatch(): Promise<BatchPayload>;
  submitRatings(submission: Submission): Promise<SubmitReply>;
  fetchProgress(): Promise<Progress>;
}

export interface SessionState {
  phase: 'loading' | 'rating' | 'submitting' | 'done' | 'failed';
  view: BatchView | null;
  progress: Progress | null;
  error: string | null;
  canRetry: boolean;
}

export class Session {
  state: SessionState = {
    phase: 'loading',
    view: null,
    progress: null,
    error: null,
    canRetry: false,
  };

  constructor(
    private readonly annotator: string,
    private readonly deps: SessionDeps,
    private readonly onChange: (state: SessionState) => void,
  ) {}

  private update(patch: Partial<SessionState>): void {
    this.state = { ...this.state, ...patch };
    this.onChange(this.state);
  }

  async start(): Promise<void> {
    this.update({ phase: 'loading', error: null, canRetry: false });
    try {
      const progress = await this.deps.fetchProgress();
      const batch = await this.deps.fetchBatch();
      if (batch.done) {
        this.update({ phase: 'done', view: null, progress });
        return;
      }
      this.update({ phase: 'rating', view: makeView(batch), progress });
    } catch (err) {
      this.fail(err, () => this.start());
    }
  }

  rate(index: number, rating: unknown): void {
    if (this.state.phase !== 'rating' || !this.state.view) {
      return;
    }
    this.update({ view: setRating(this.state.view, index, rating), error: null });
  }

  imageFailed(index: number): void {
    if (!this.state.view) {
      return;
    }
    this.update({ view: markLoadFailed(this.state.view, index) });
  }

  get submittable(): boolean {
    return this.state.phase === 'rating' && !!this.state.view && canSubmit(this.state.view);
  }

  async submit(): Promise<void> {
    if (!this.submittable || !this.state.view) {
      return; // also guards against a second in-flight submission
    }
    const submission = toSubmission(this.state.view, this.annotator);
    this.update({ phase: 'submitting', error: null, canRetry: false });
    try {
      await this.deps.submitRatings(submission);
      await this.start();
    } catch (err) {
      if (err instanceof ApiError) {
        // the service refused (duplicate, validation); keep entered ratings
        this.update({ phase: 'rating', error: err.message, canRetry: false });
      } else {
        this.fail(err, () => this.submit());
      }
    }
  }

  private retryAction: (() => Promise<void>) | null = null;

  private fail(err: unknown, retry: () => Promise<void>): void {
    this.retryAction = retry;
    const message = err instanceof Error ? err.message : String(err);
    const phase = this.state.view ? 'rating' : 'failed';
    this.update({ phase, error: `network problem: ${message}`, canRetry: true });
  }

  async retry(): Promise<void> {
    const action = this.retryAction;
    this.retryAction = null;
    if (action) {
      await action();
    }
  }
}
