import { describe, expect, it } from 'vitest';

import {
  canSubmit,
  isRating,
  makeView,
  markLoadFailed,
  setRating,
  toSubmission,
} from '../src/state.js';
import type { BatchPayload } from '../src/state.js';

const payload: BatchPayload = {
  done: false,
  batch_id: 'b1',
  class_id: 7,
  image_ids: ['i1', 'i2', 'i3', 'i4', 'i5'],
  image_urls: ['/static/i1', '/static/i2', '/static/i3', '/static/i4', '/static/i5'],
};

describe('makeView', () => {
  it('builds one unrated slot per image', () => {
    const view = makeView(payload);
    expect(view.slots).toHaveLength(5);
    expect(view.slots.every((s) => s.rating === null)).toBe(true);
    expect(view.batchId).toBe('b1');
  });

  it('rejects a done payload', () => {
    expect(() => makeView({ done: true })).toThrow();
  });
});

describe('setRating', () => {
  it('accepts only 0, 1, 2', () => {
    const view = makeView(payload);
    for (const bad of [3, -1, 1.5, '1', null, undefined]) {
      expect(() => setRating(view, 0, bad)).toThrow(RangeError);
    }
    expect(setRating(view, 0, 2).slots[0]?.rating).toBe(2);
  });

  it('rejects out-of-range slots', () => {
    expect(() => setRating(makeView(payload), 9, 1)).toThrow(RangeError);
  });

  it('allows revision before submission', () => {
    let view = makeView(payload);
    view = setRating(view, 1, 0);
    view = setRating(view, 1, 2);
    expect(view.slots[1]?.rating).toBe(2);
  });
});

describe('canSubmit / toSubmission', () => {
  it('requires every slot rated', () => {
    let view = makeView(payload);
    for (let k = 0; k < 4; k += 1) {
      view = setRating(view, k, 1);
      expect(canSubmit(view)).toBe(false);
    }
    view = setRating(view, 4, 0);
    expect(canSubmit(view)).toBe(true);
  });

  it('refuses to build a partial submission', () => {
    const view = setRating(makeView(payload), 0, 2);
    expect(() => toSubmission(view, 'alice')).toThrow();
  });

  it('emits exactly B in-range ratings', () => {
    let view = makeView(payload);
    payload.image_ids!.forEach((_, k) => {
      view = setRating(view, k, (k % 3) as 0 | 1 | 2);
    });
    const submission = toSubmission(view, 'alice');
    expect(submission.batch).toBe('b1');
    expect(submission.ratings).toHaveLength(5);
    for (const r of submission.ratings) {
      expect(isRating(r.rating)).toBe(true);
    }
  });
});

describe('markLoadFailed', () => {
  it('keeps the slot ratable', () => {
    let view = markLoadFailed(makeView(payload), 2);
    expect(view.slots[2]?.loadFailed).toBe(true);
    view = setRating(view, 2, 1);
    expect(view.slots[2]?.rating).toBe(1);
  });
});
