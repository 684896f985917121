// End-to-end contract test against the real annotation service: spawns the
// Python CLI, generates a disk fixture, and drives the UI session through
// plain HTTP. Requires the Python package to be installed (pip install -e .).
import { execFileSync, spawn } from 'node:child_process';
import type { ChildProcessWithoutNullStreams } from 'node:child_process';
import { mkdtempSync, writeFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join, resolve } from 'node:path';
import { afterAll, beforeAll, describe, expect, it } from 'vitest';

import { ApiError, fetchBatch, fetchProgress, submitRatings } from '../src/api.js';
import { Session } from '../src/controller.js';
import { canSubmit, makeView, setRating, toSubmission } from '../src/state.js';
import type { Rating } from '../src/state.js';

const repoRoot = resolve(__dirname, '..', '..');
let server: ChildProcessWithoutNullStreams;
let base = '';
let workdir = '';

function pythonGenerateFixture(dir: string): string {
  const script = [
    'import sys',
    `sys.path.insert(0, ${JSON.stringify(join(repoRoot, 'tests'))})`,
    'from pathlib import Path',
    'from synth import write_dataset',
    `print(write_dataset(Path(${JSON.stringify(dir)}) / 'data', n_classes=3, per_class=20, B=5, seed=7))`,
  ].join('\n');
  return execFileSync('python3', ['-c', script], { encoding: 'utf-8' }).trim();
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), 'annotation-ui-'));
  const manifest = pythonGenerateFixture(workdir);
  const campaign = {
    B: 5,
    classes_per_annotator: 2,
    shared_set_size: 5,
    shared_classes: 1,
    redundancy_groups: { g1: ['alice', 'bob'] },
    roles: { alice: 'train-campaign', bob: 'train-campaign' },
  };
  writeFileSync(join(workdir, 'campaign.json'), JSON.stringify(campaign));
  server = spawn('python3', [
    '-m', 'iconika.cli', 'serve',
    '--manifest', manifest,
    '--campaign', join(workdir, 'campaign.json'),
    '--log', join(workdir, 'ratings.jsonl'),
    '--port', '0',
  ]);
  base = await new Promise<string>((resolveUrl, reject) => {
    const timer = setTimeout(() => reject(new Error('service did not start')), 20_000);
    server.stdout.on('data', (chunk: Buffer) => {
      const match = chunk.toString().match(/serving on (http:\/\/\S+)/);
      if (match) {
        clearTimeout(timer);
        resolveUrl(match[1]!);
      }
    });
    server.on('exit', (code) => reject(new Error(`service exited early (${code})`)));
  });
});

afterAll(async () => {
  if (server && server.exitCode === null) {
    server.kill('SIGINT');
    await new Promise((resolveExit) => server.on('exit', resolveExit));
  }
});

async function exportedLines(): Promise<string[]> {
  const response = await fetch(`${base}/api/export`);
  const text = await response.text();
  return text.split('\n').filter((line) => line.trim().length > 0);
}

describe('live service contract', () => {
  it('serves a batch of five and refreshing re-fetches the same batch', async () => {
    const first = await fetchBatch(base, 'alice');
    expect(first.done).toBe(false);
    expect(first.image_ids).toHaveLength(5);
    const again = await fetchBatch(base, 'alice'); // refresh before submitting
    expect(again.batch_id).toBe(first.batch_id);
    expect(again.image_ids).toEqual(first.image_ids);
  });

  it('a submitted batch produces exactly five valid records', async () => {
    const before = (await exportedLines()).length;
    const deps = {
      fetchBatch: () => fetchBatch(base, 'alice'),
      submitRatings: (s: Parameters<typeof submitRatings>[1]) => submitRatings(base, s),
      fetchProgress: () => fetchProgress(base, 'alice'),
    };
    const session = new Session('alice', deps, () => {});
    await session.start();
    expect(session.state.phase).toBe('rating');
    const view = session.state.view!;
    view.slots.forEach((_, k) => session.rate(k, (k % 3) as Rating));
    expect(session.submittable).toBe(true);
    await session.submit();
    expect(session.state.error).toBeNull();
    const lines = await exportedLines();
    expect(lines.length - before).toBe(5);
    for (const line of lines) {
      const record = JSON.parse(line) as { rating: number; annotator_id: string };
      expect([0, 1, 2]).toContain(record.rating);
      expect(record.annotator_id).toBe('alice');
    }
    const progress = await fetchProgress(base, 'alice');
    expect(progress.rated_batches).toBe(1);
  });

  it('rejects a duplicate submission without losing records or ratings', async () => {
    // bob shares the group's first batch; submit it once, then again
    const payload = await fetchBatch(base, 'bob');
    let view = makeView(payload);
    view.slots.forEach((_, k) => {
      view = setRating(view, k, 2);
    });
    expect(canSubmit(view)).toBe(true);
    const submission = toSubmission(view, 'bob');
    await submitRatings(base, submission);
    const before = (await exportedLines()).length;
    let rejection: ApiError | null = null;
    try {
      await submitRatings(base, submission);
    } catch (err) {
      rejection = err as ApiError;
    }
    expect(rejection).toBeInstanceOf(ApiError);
    expect(rejection!.status).toBe(409);
    expect(rejection!.message).toContain('already rated');
    expect((await exportedLines()).length).toBe(before);
    // the view still carries the entered ratings after the rejection
    expect(view.slots.every((slot) => slot.rating === 2)).toBe(true);
  });

  it('the service re-validates ratings server-side', async () => {
    const payload = await fetchBatch(base, 'bob');
    if (payload.done) {
      return; // bob may have exhausted his assignment; covered above
    }
    const bogus = {
      annotator: 'bob',
      batch: payload.batch_id!,
      ratings: payload.image_ids!.map((image_id) => ({ image_id, rating: 7 as Rating })),
    };
    let rejection: ApiError | null = null;
    try {
      await submitRatings(base, bogus);
    } catch (err) {
      rejection = err as ApiError;
    }
    expect(rejection).toBeInstanceOf(ApiError);
    expect(rejection!.status).toBe(400);
  });
});
