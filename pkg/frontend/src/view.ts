// DOM rendering. One row of equal-height image slots, three labeled rating
// buttons per slot, a submit button that only enables once every image is
// rated, and banners for rejections / network retries. Digits 0-2 rate the
// focused slot.

import type { Session, SessionState } from './controller.js';
import { RATING_LABELS, Rating } from './state.js';

const RATINGS: Rating[] = [0, 1, 2];

export function render(root: HTMLElement, session: Session, state: SessionState): void {
  root.innerHTML = '';
  root.appendChild(header(state));
  if (state.error) {
    root.appendChild(banner(session, state));
  }
  switch (state.phase) {
    case 'loading':
      root.appendChild(message('Loading…'));
      return;
    case 'done':
      root.appendChild(doneScreen(state));
      return;
    case 'failed':
      return; // banner already offers retry
    default:
      break;
  }
  if (!state.view) {
    return;
  }
  const row = document.createElement('div');
  row.className = 'batch-row';
  state.view.slots.forEach((slot, index) => {
    const cell = document.createElement('figure');
    cell.className = 'slot';
    cell.tabIndex = 0;
    cell.dataset.imageId = slot.imageId;
    cell.addEventListener('keydown', (event) => {
      if (event.key === '0' || event.key === '1' || event.key === '2') {
        session.rate(index, Number(event.key));
      }
    });
    if (slot.loadFailed) {
      const placeholder = document.createElement('div');
      placeholder.className = 'placeholder';
      placeholder.textContent = `image unavailable (${slot.imageId})`;
      cell.appendChild(placeholder);
    } else {
      const img = document.createElement('img');
      img.src = slot.url;
      img.alt = slot.imageId;
      img.addEventListener('error', () => session.imageFailed(index));
      cell.appendChild(img);
    }
    const controls = document.createElement('div');
    controls.className = 'ratings';
    for (const value of RATINGS) {
      const button = document.createElement('button');
      button.type = 'button';
      button.className = 'rating';
      button.dataset.rating = String(value);
      button.textContent = `${value} ${RATING_LABELS[value]}`;
      button.setAttribute('aria-pressed', slot.rating === value ? 'true' : 'false');
      button.addEventListener('click', () => session.rate(index, value));
      controls.appendChild(button);
    }
    cell.appendChild(controls);
    row.appendChild(cell);
  });
  root.appendChild(row);

  const submit = document.createElement('button');
  submit.type = 'button';
  submit.id = 'submit';
  submit.textContent = state.phase === 'submitting' ? 'Submitting…' : 'Submit ratings';
  submit.disabled = !session.submittable;
  submit.addEventListener('click', () => void session.submit());
  root.appendChild(submit);
}

function header(state: SessionState): HTMLElement {
  const el = document.createElement('header');
  const title = document.createElement('h1');
  title.textContent = 'Which images would you use to show what this bird looks like?';
  el.appendChild(title);
  const progress = document.createElement('p');
  progress.className = 'progress';
  if (state.progress) {
    progress.textContent = `${state.progress.rated_batches} / ${state.progress.total_batches} batches rated`;
  }
  el.appendChild(progress);
  return el;
}

function banner(session: Session, state: SessionState): HTMLElement {
  const el = document.createElement('div');
  el.className = 'banner';
  el.setAttribute('role', 'alert');
  const text = document.createElement('span');
  text.textContent = state.error ?? '';
  el.appendChild(text);
  if (state.canRetry) {
    const retry = document.createElement('button');
    retry.type = 'button';
    retry.id = 'retry';
    retry.textContent = 'Retry';
    retry.addEventListener('click', () => void session.retry());
    el.appendChild(retry);
  }
  return el;
}

function doneScreen(state: SessionState): HTMLElement {
  const el = document.createElement('div');
  el.className = 'done';
  const count = state.progress ? state.progress.rated_batches : 0;
  el.textContent = `All done — thank you! You rated ${count} batches.`;
  return el;
}

function message(text: string): HTMLElement {
  const el = document.createElement('p');
  el.className = 'status';
  el.textContent = text;
  return el;
}
