// Thin typed client for the annotation service endpoints.

import type { BatchPayload, Submission } from './state.js';

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
    this.name = 'ApiError';
  }
}

export interface Progress {
  annotator: string;
  rated_batches: number;
  total_batches: number;
  rated_images: number;
}

export interface SubmitReply {
  accepted: boolean;
  count: number;
}

async function asJson<T>(response: Response): Promise<T> {
  const body = (await response.json()) as T & { error?: string };
  if (!response.ok) {
    throw new ApiError(body.error ?? `request failed (${response.status})`, response.status);
  }
  return body;
}

export async function fetchBatch(base: string, annotator: string): Promise<BatchPayload> {
  const response = await fetch(`${base}/api/batch?annotator=${encodeURIComponent(annotator)}`);
  return asJson<BatchPayload>(response);
}

export async function submitRatings(base: string, submission: Submission): Promise<SubmitReply> {
  const response = await fetch(`${base}/api/ratings`, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify(submission),
  });
  return asJson<SubmitReply>(response);
}

export async function fetchProgress(base: string, annotator: string): Promise<Progress> {
  const response = await fetch(`${base}/api/progress?annotator=${encodeURIComponent(annotator)}`);
  return asJson<Progress>(response);
}
