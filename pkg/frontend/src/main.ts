// Browser entry point: renders the review queue against the same-origin
// review service and wires keyboard-first verdict entry.

import { CORE_CONDITIONS, ReviewApi, VerdictValue } from './api.js';
import { ReviewSession } from './state.js';

const VERDICT_LABELS: Record<VerdictValue, string> = {
  correct: 'correct',
  incorrect: 'incorrect',
  not_applicable: 'n/a',
};

const VERDICT_KEYS: Record<string, VerdictValue> = {
  '1': 'correct',
  '2': 'incorrect',
  '3': 'not_applicable',
};

const CONDITION_LABELS: Record<string, string> = {
  caries: 'Caries',
  staining: 'Staining',
  enamel_loss: 'Enamel loss',
  discoloration: 'Discoloration',
};

const app = document.getElementById('app') as HTMLElement;
const api = new ReviewApi('');

let session: ReviewSession | null = null;
let highlighted = 0;
let zoomed = false;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderLogin(): void {
  const panel = el('div', 'panel login');
  panel.append(el('h1', undefined, 'Caption review'));
  panel.append(el('p', 'hint', 'Enter your reviewer id to start the queue.'));
  const input = el('input');
  input.placeholder = 'reviewer id';
  input.value = localStorage.getItem('reviewer') ?? '';
  const start = el('button', 'primary', 'Start reviewing');
  const begin = () => {
    const reviewer = input.value.trim();
    if (!reviewer) return;
    localStorage.setItem('reviewer', reviewer);
    session = new ReviewSession(api, reviewer);
    void session.loadNext().then(render);
    render();
  };
  start.addEventListener('click', begin);
  input.addEventListener('keydown', (ev) => {
    if (ev.key === 'Enter') begin();
  });
  panel.append(input, start);
  app.replaceChildren(panel);
  input.focus();
}

function renderProgress(target: HTMLElement): void {
  if (!session?.progress) return;
  const { datasets, overall } = session.progress;
  const bar = el('div', 'progress');
  bar.append(el('span', 'overall', `${overall.judged}/${overall.total} judged`));
  for (const [name, stats] of Object.entries(datasets)) {
    bar.append(el('span', 'dataset', `${name}: ${stats.judged}/${stats.total}`));
  }
  target.append(bar);
}

function renderBanner(target: HTMLElement): void {
  if (!session) return;
  if (session.lastError) {
    const banner = el('div', 'banner error');
    banner.append(el('span', undefined, session.lastError));
    const retry = el('button', undefined, 'Retry');
    retry.addEventListener('click', () => {
      void (async () => {
        await session!.retryUnsent();
        if (session!.phase === 'error' || session!.phase === 'done') {
          await session!.loadNext();
        }
        render();
      })();
    });
    banner.append(retry);
    target.append(banner);
  }
  if (session.unsent.length > 0) {
    target.append(el('div', 'banner unsent', `${session.unsent.length} unsent judgment(s) queued`));
  }
}

function renderVerdictRow(condition: string, index: number): HTMLElement {
  const row = el('div', 'verdict-row' + (index === highlighted ? ' highlighted' : ''));
  row.append(el('span', 'condition', CONDITION_LABELS[condition] ?? condition));
  for (const value of Object.values(VERDICT_KEYS)) {
    const chosen = session!.verdicts[condition] === value && session!.touched.has(condition);
    const dormant = session!.verdicts[condition] === value && !session!.touched.has(condition);
    const button = el(
      'button',
      'verdict' + (chosen ? ' chosen' : dormant ? ' dormant' : ''),
      VERDICT_LABELS[value],
    );
    button.addEventListener('click', () => {
      highlighted = index;
      session!.setVerdict(condition, value);
      render();
    });
    row.append(button);
  }
  return row;
}

function renderTask(): void {
  const s = session!;
  const task = s.task!;
  const panel = el('div', 'panel task');
  renderBanner(panel);
  renderProgress(panel);

  const head = el('div', 'task-head');
  head.append(el('span', 'dataset-badge', task.dataset_id));
  head.append(el('span', 'item-id', task.item_id));
  panel.append(head);

  const figure = el('figure', zoomed ? 'crop zoomed' : 'crop');
  const img = el('img');
  img.src = api.imageUrl(task);
  img.alt = `crop ${task.item_id}`;
  img.addEventListener('click', () => {
    zoomed = !zoomed;
    render();
  });
  figure.append(img);
  figure.append(el('figcaption', 'hint', 'click to zoom'));
  panel.append(figure);

  // captions are shown verbatim; condition judging needs every word visible
  const captions = el('div', 'captions');
  captions.append(el('p', 'short', task.short_caption));
  captions.append(el('p', 'long', task.long_caption));
  panel.append(captions);

  if (task.conditions.length > 0) {
    const chips = el('div', 'chips');
    chips.append(el('span', 'hint', 'model-reported conditions:'));
    for (const condition of task.conditions) {
      chips.append(el('span', 'chip', condition));
    }
    panel.append(chips);
  }

  const grid = el('div', 'verdicts');
  CORE_CONDITIONS.forEach((condition, index) => {
    grid.append(renderVerdictRow(condition, index));
  });
  panel.append(grid);

  const submit = el('button', 'primary submit', 'Submit (Enter)');
  submit.disabled = !s.canSubmit();
  submit.addEventListener('click', () => {
    void s.submit().then(render);
    render();
  });
  panel.append(submit);
  panel.append(
    el(
      'p',
      'hint keys',
      'keys: up/down pick a condition, 1 correct / 2 incorrect / 3 n/a, space cycles, Enter submits',
    ),
  );
  app.replaceChildren(panel);
}

function renderSimple(message: string, spinning = false): void {
  const panel = el('div', 'panel');
  renderBanner(panel);
  renderProgress(panel);
  panel.append(el('p', spinning ? 'hint' : 'headline', message));
  app.replaceChildren(panel);
}

function render(): void {
  if (!session) {
    renderLogin();
    return;
  }
  switch (session.phase) {
    case 'idle':
    case 'loading':
      renderSimple('loading next task...', true);
      break;
    case 'reviewing':
    case 'submitting':
      renderTask();
      break;
    case 'done':
      renderSimple('All items reviewed. Thank you!');
      break;
    case 'error':
      renderSimple('Service unreachable.');
      break;
  }
}

document.addEventListener('keydown', (ev) => {
  if (!session || session.phase !== 'reviewing') return;
  const target = ev.target as HTMLElement | null;
  if (target && target.tagName === 'INPUT') return;
  if (ev.key === 'ArrowDown') {
    highlighted = (highlighted + 1) % CORE_CONDITIONS.length;
    render();
  } else if (ev.key === 'ArrowUp') {
    highlighted = (highlighted + CORE_CONDITIONS.length - 1) % CORE_CONDITIONS.length;
    render();
  } else if (ev.key in VERDICT_KEYS) {
    session.setVerdict(CORE_CONDITIONS[highlighted], VERDICT_KEYS[ev.key]);
    highlighted = Math.min(highlighted + 1, CORE_CONDITIONS.length - 1);
    render();
  } else if (ev.key === ' ') {
    ev.preventDefault();
    session.cycleVerdict(CORE_CONDITIONS[highlighted]);
    render();
  } else if (ev.key === 'Enter') {
    if (session.canSubmit()) {
      void session.submit().then(render);
      render();
    }
  }
});

render();
