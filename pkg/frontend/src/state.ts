// Pure view state for one rating batch. Nothing here touches the DOM or the
// network, so the submission invariants (exactly B ratings, each in
// {0, 1, 2}) are enforceable in one place and unit-testable.

export type Rating = 0 | 1 | 2;

export const RATING_LABELS: Record<Rating, string> = {
  0: 'bad',
  1: 'fair',
  2: 'good',
};

export interface BatchPayload {
  done: boolean;
  batch_id?: string;
  class_id?: number;
  image_ids?: string[];
  image_urls?: string[];
}

export interface Slot {
  imageId: string;
  url: string;
  rating: Rating | null;
  loadFailed: boolean;
}

export interface BatchView {
  batchId: string;
  classId: number;
  slots: Slot[];
}

export interface Submission {
  annotator: string;
  batch: string;
  ratings: { image_id: string; rating: Rating }[];
}

export function isRating(value: unknown): value is Rating {
  return value === 0 || value === 1 || value === 2;
}

export function makeView(batch: BatchPayload): BatchView {
  if (batch.done || !batch.batch_id || !batch.image_ids) {
    throw new Error('cannot build a view from a finished or malformed batch');
  }
  const urls = batch.image_urls ?? [];
  return {
    batchId: batch.batch_id,
    classId: batch.class_id ?? 0,
    slots: batch.image_ids.map((imageId, k) => ({
      imageId,
      url: urls[k] ?? `/static/${imageId}`,
      rating: null,
      loadFailed: false,
    })),
  };
}

export function setRating(view: BatchView, index: number, rating: unknown): BatchView {
  if (!isRating(rating)) {
    throw new RangeError(`rating must be 0, 1 or 2, got ${String(rating)}`);
  }
  const slot = view.slots[index];
  if (!slot) {
    throw new RangeError(`no slot at index ${index}`);
  }
  const slots = view.slots.slice();
  slots[index] = { ...slot, rating };
  return { ...view, slots };
}

export function markLoadFailed(view: BatchView, index: number): BatchView {
  const slot = view.slots[index];
  if (!slot) {
    return view;
  }
  const slots = view.slots.slice();
  slots[index] = { ...slot, loadFailed: true };
  return { ...view, slots };
}

export function canSubmit(view: BatchView): boolean {
  return view.slots.length > 0 && view.slots.every((slot) => slot.rating !== null);
}

export function toSubmission(view: BatchView, annotator: string): Submission {
  if (!canSubmit(view)) {
    throw new Error('submission requires a rating for every image in the batch');
  }
  return {
    annotator,
    batch: view.batchId,
    ratings: view.slots.map((slot) => ({
      image_id: slot.imageId,
      rating: slot.rating as Rating,
    })),
  };
}
