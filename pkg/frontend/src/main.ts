import { fetchBatch, fetchProgress, submitRatings } from './api.js';
import { Session } from './controller.js';
import { render } from './view.js';

const root = document.getElementById('app');
if (!root) {
  throw new Error('missing #app container');
}

const params = new URLSearchParams(window.location.search);
const annotator = params.get('annotator');
if (!annotator) {
  root.textContent = 'Add ?annotator=<your token> to the URL to start rating.';
} else {
  const base = window.location.origin;
  const session = new Session(
    annotator,
    {
      fetchBatch: () => fetchBatch(base, annotator),
      submitRatings: (submission) => submitRatings(base, submission),
      fetchProgress: () => fetchProgress(base, annotator),
    },
    (state) => render(root, session, state),
  );
  void session.start();
}
