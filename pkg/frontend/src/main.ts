/** Bootstrap: config, API wiring, keyboard handling, render loop.
 *
 * Configuration is limited to the API base URL and the reviewer id
 * (?api=...&reviewer=..., both remembered in localStorage).
 */

import { ApiError, ReviewApiClient } from './api.js';
import { actionForKey } from './keyboard.js';
import {
  changePage,
  initialState,
  loadFailed,
  pageLoaded,
  select,
  selectByOffset,
  submitVerdict,
  toggleOverlay,
  verdictAcked,
  verdictFailed,
  type ViewState,
} from './state.js';
import { renderDetail, renderErrorBanner, renderGallery, renderHeader, renderVerdictControls } from './render.js';
import type { CandidateDetail, ReviewReport } from './types.js';

function configValue(key: string, fallback: string): string {
  const fromUrl = new URLSearchParams(window.location.search).get(key);
  if (fromUrl) {
    localStorage.setItem(`review.${key}`, fromUrl);
    return fromUrl;
  }
  return localStorage.getItem(`review.${key}`) ?? fallback;
}

const api = new ReviewApiClient(configValue('api', 'http://127.0.0.1:8400'));

let state: ViewState = initialState(configValue('reviewer', ''));
let detail: CandidateDetail | null = null;
let report: ReviewReport | null = null;

const headerEl = document.getElementById('header') as HTMLElement;
const bannerEl = document.getElementById('banner') as HTMLElement;
const galleryEl = document.getElementById('gallery') as HTMLElement;
const detailEl = document.getElementById('detail') as HTMLElement;
const controlsEl = document.getElementById('controls') as HTMLElement;

function redraw(): void {
  renderHeader(headerEl, state, report);
  renderErrorBanner(bannerEl, state, () => void loadPage(state.page));
  renderGallery(galleryEl, state, api, (id) => {
    state = select(state, id);
    void refreshDetail();
    redraw();
  });
  renderDetail(detailEl, state, detail, api);
  renderVerdictControls(controlsEl, state, handleVerdict, () => {
    state = toggleOverlay(state);
    redraw();
  });
}

async function refreshDetail(): Promise<void> {
  if (state.selectedId === null) {
    detail = null;
    redraw();
    return;
  }
  const wanted = state.selectedId;
  try {
    const fetched = await api.getCandidate(wanted);
    if (state.selectedId === wanted) {
      detail = fetched;
    }
  } catch (err) {
    detail = null;
    state = loadFailed(state, `candidate detail failed: ${String(err)}`);
  }
  redraw();
}

async function refreshReport(): Promise<void> {
  if (!state.slideId) return;
  try {
    report = await api.report(state.slideId);
  } catch {
    report = null; // header simply omits progress until the next refresh
  }
  redraw();
}

async function loadPage(page: number): Promise<void> {
  const slideId = state.slideId ?? (await pickFirstSlide());
  if (!slideId) {
    state = loadFailed(state, 'no slides are exported on this server');
    redraw();
    return;
  }
  try {
    const data = await api.listCandidates(slideId, page, state.pageSize, state.sort);
    state = pageLoaded(state, data);
    if (state.selectedId === null && state.gallery.length > 0) {
      state = select(state, state.gallery[0].id);
    }
  } catch (err) {
    state = loadFailed(state, `loading candidates failed: ${String(err)}`);
  }
  await refreshDetail();
  await refreshReport();
}

async function pickFirstSlide(): Promise<string | null> {
  try {
    const slides = await api.listSlides();
    return slides.length ? slides[0].slide_id : null;
  } catch {
    return null;
  }
}

function handleVerdict(decision: 'ctc' | 'non-ctc' | 'artefact'): void {
  const { state: next, request } = submitVerdict(state, decision);
  state = next;
  redraw();
  if (!request) return;
  void refreshDetail();
  api.postVerdict(request.candidateId, request.decision, state.reviewer).then(
    () => {
      state = verdictAcked(state, request);
      void refreshReport();
      redraw();
    },
    (err) => {
      const status = err instanceof ApiError ? ` (HTTP ${err.status})` : '';
      state = verdictFailed(state, request, `verdict rejected${status}`);
      void refreshDetail();
      redraw();
    },
  );
}

window.addEventListener('keydown', (event) => {
  if (event.target instanceof HTMLInputElement
      || event.target instanceof HTMLTextAreaElement) {
    return;
  }
  const action = actionForKey(event.key);
  if (!action) return;
  event.preventDefault();
  switch (action.kind) {
    case 'navigate':
      state = selectByOffset(state, action.offset);
      void refreshDetail();
      break;
    case 'page': {
      const target = changePage(state, action.delta);
      if (target !== state.page) void loadPage(target);
      break;
    }
    case 'verdict':
      handleVerdict(action.decision);
      break;
    case 'overlay':
      state = toggleOverlay(state);
      break;
  }
  redraw();
});

redraw();
void loadPage(1);
