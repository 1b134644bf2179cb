/** DOM construction. Values shown in the detail table always come from
 * the API payload via exactValue(); anything recomputed locally is
 * cosmetic (badges, progress bars).
 */

import type { ReviewApiClient } from './api.js';
import { exactValue, probabilityBadge } from './format.js';
import { reviewStatus, type ViewState } from './state.js';
import type { CandidateDetail, CandidateSummary, ReviewReport } from './types.js';

const CHANNELS = ['dapi', 'ck', 'cd45'] as const;
const PANELS = ['dapi', 'ck', 'cd45', 'composite'] as const;

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

export function renderHeader(
  root: HTMLElement,
  state: ViewState,
  report: ReviewReport | null,
): void {
  root.replaceChildren();
  const title = el('span', 'slide-title',
    state.slideId ? `slide ${state.slideId}` : 'no slide loaded');
  root.appendChild(title);
  root.appendChild(el('span', 'counts',
    `${state.total} candidates · page ${state.page}/${Math.max(state.totalPages, 1)}`));
  if (report) {
    const confirmed = report.confirmed;
    root.appendChild(el('span', 'confirmed',
      `confirmed: ${confirmed.ctc} ctc / ${confirmed['non-ctc']} non-ctc / ` +
      `${confirmed.artefact} artefact`));
    const mine = report.per_reviewer[state.reviewer];
    if (mine) {
      root.appendChild(el('span', 'progress',
        `${state.reviewer}: ${mine.reviewed}/${mine.total} ` +
        `(${Math.round(mine.progress * 100)}%)`));
    }
  }
  root.appendChild(el('span', 'reviewer-id', `reviewer: ${state.reviewer || '(unset)'}`));
}

export function renderErrorBanner(
  root: HTMLElement,
  state: ViewState,
  onRetry: () => void,
): void {
  root.replaceChildren();
  if (!state.error) {
    root.hidden = true;
    return;
  }
  root.hidden = false;
  root.appendChild(el('span', 'error-text', state.error));
  const retry = el('button', 'retry', 'retry');
  retry.addEventListener('click', onRetry);
  root.appendChild(retry);
}

export function renderGallery(
  root: HTMLElement,
  state: ViewState,
  api: ReviewApiClient,
  onSelect: (id: string) => void,
): void {
  root.replaceChildren();
  if (state.gallery.length === 0) {
    root.appendChild(el('div', 'empty-state', 'no candidates on this slide'));
    return;
  }
  for (const candidate of state.gallery) {
    root.appendChild(galleryTile(candidate, state, api, onSelect));
  }
}

function galleryTile(
  candidate: CandidateSummary,
  state: ViewState,
  api: ReviewApiClient,
  onSelect: (id: string) => void,
): HTMLElement {
  const tile = el('button', 'tile');
  tile.dataset.candidateId = candidate.id;
  if (candidate.id === state.selectedId) {
    tile.classList.add('selected');
  }
  const img = el('img', 'thumb');
  img.src = api.imageUrl(candidate.id, 'composite');
  img.alt = candidate.id;
  tile.appendChild(img);
  tile.appendChild(el('span', 'prob-badge', probabilityBadge(candidate.probability)));
  const status = reviewStatus(state, candidate);
  if (status) {
    tile.appendChild(el('span', `status-badge status-${status}`, status));
  }
  tile.addEventListener('click', () => onSelect(candidate.id));
  return tile;
}

export function renderDetail(
  root: HTMLElement,
  state: ViewState,
  detail: CandidateDetail | null,
  api: ReviewApiClient,
): void {
  root.replaceChildren();
  if (!detail) {
    root.appendChild(el('div', 'empty-state',
      'select a candidate (arrow keys or j/k)'));
    return;
  }
  root.appendChild(el('h2', 'candidate-id', detail.id));

  const strip = el('div', 'panel-strip');
  for (const kind of PANELS) {
    const panel = el('figure', 'panel');
    const wrap = el('div', 'panel-image');
    const img = el('img');
    img.alt = `${detail.id} ${kind}`;
    img.src = api.imageUrl(detail.id, kind);
    img.addEventListener('error', () => {
      wrap.replaceChildren(el('div', 'image-missing', `${kind}: image missing`));
    });
    wrap.appendChild(img);
    if (state.overlay) {
      const contour = el('canvas', 'mask-contour') as HTMLCanvasElement;
      drawMaskContour(contour, api.imageUrl(detail.id, 'nucleus_mask'));
      wrap.appendChild(contour);
    }
    panel.appendChild(wrap);
    panel.appendChild(el('figcaption', 'panel-name', kind));
    strip.appendChild(panel);
  }
  root.appendChild(strip);
  root.appendChild(renderMfiTable(detail));
}

/** Yellow nuclear contour, drawn client-side from the mask image.
 *
 * The mask covers the central analysis window of the display crop, so
 * the canvas is positioned by CSS; only contour pixels are painted.
 */
function drawMaskContour(canvas: HTMLCanvasElement, maskUrl: string): void {
  const img = new Image();
  img.crossOrigin = 'anonymous';
  img.onload = () => {
    const w = img.naturalWidth;
    const h = img.naturalHeight;
    canvas.width = w;
    canvas.height = h;
    const ctx = canvas.getContext('2d');
    if (!ctx) return;
    ctx.drawImage(img, 0, 0);
    const data = ctx.getImageData(0, 0, w, h);
    const inside = (x: number, y: number): boolean =>
      x >= 0 && y >= 0 && x < w && y < h && data.data[(y * w + x) * 4] > 127;
    ctx.clearRect(0, 0, w, h);
    ctx.fillStyle = '#ffee00';
    for (let y = 0; y < h; y += 1) {
      for (let x = 0; x < w; x += 1) {
        if (!inside(x, y)) continue;
        const interior = inside(x - 1, y) && inside(x + 1, y)
          && inside(x, y - 1) && inside(x, y + 1);
        if (!interior) {
          ctx.fillRect(x, y, 1, 1);
        }
      }
    }
  };
  img.src = maskUrl;
}

export function renderMfiTable(detail: CandidateDetail): HTMLElement {
  const table = el('table', 'mfi-table');
  const head = el('tr');
  head.append(el('th'), ...CHANNELS.map((ch) => el('th', undefined, ch)));
  table.appendChild(head);
  for (const objKey of ['nuc', 'cell'] as const) {
    const row = el('tr');
    row.appendChild(el('th', undefined, objKey === 'nuc' ? 'nuclear MFI' : 'cell MFI'));
    for (const ch of CHANNELS) {
      const cell = el('td', 'mfi-value', exactValue(detail.mfi[objKey][ch]));
      cell.dataset.object = objKey;
      cell.dataset.channel = ch;
      row.appendChild(cell);
    }
    table.appendChild(row);
  }
  const probRow = el('tr');
  probRow.appendChild(el('th', undefined, 'probability'));
  const probCell = el('td', 'probability-value', exactValue(detail.probability));
  probCell.colSpan = CHANNELS.length;
  probRow.appendChild(probCell);
  table.appendChild(probRow);
  return table;
}

export function renderVerdictControls(
  root: HTMLElement,
  state: ViewState,
  onVerdict: (decision: 'ctc' | 'non-ctc' | 'artefact') => void,
  onOverlayToggle: () => void,
): void {
  root.replaceChildren();
  const enabled = state.selectedId !== null && state.reviewer.length > 0;
  for (const [decision, key] of [['ctc', 'C'], ['non-ctc', 'N'], ['artefact', 'A']] as const) {
    const button = el('button', `verdict verdict-${decision}`, `${decision} (${key})`);
    button.disabled = !enabled;
    button.addEventListener('click', () => onVerdict(decision));
    root.appendChild(button);
  }
  const overlay = el('button', 'overlay-toggle',
    state.overlay ? 'overlay on (O)' : 'overlay off (O)');
  overlay.addEventListener('click', onOverlayToggle);
  root.appendChild(overlay);
}
