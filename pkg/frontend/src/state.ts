/** View state and its transitions.
 *
 * Pure data in, pure data out: every mutation goes through a method
 * that enforces the workspace invariants (a selection always points at
 * a candidate in the loaded page; verdict entry needs a selection and
 * a reviewer id; optimistic verdicts advance immediately and roll back
 * on failure). The server stays the source of truth: a reload rebuilds
 * everything from API payloads.
 */

import type { CandidatePage, CandidateSummary, Decision } from './types.js';

export interface PendingVerdict {
  candidateId: string;
  decision: Decision;
}

export interface ViewState {
  slideId: string | null;
  page: number;
  pageSize: number;
  sort: 'probability' | 'id';
  gallery: CandidateSummary[];
  total: number;
  totalPages: number;
  selectedId: string | null;
  overlay: boolean;
  reviewer: string;
  pending: PendingVerdict[];
  error: string | null;
}

export function initialState(reviewer: string, pageSize = 20): ViewState {
  return {
    slideId: null,
    page: 1,
    pageSize,
    sort: 'probability',
    gallery: [],
    total: 0,
    totalPages: 0,
    selectedId: null,
    overlay: true,
    reviewer,
    pending: [],
    error: null,
  };
}

export function isReviewedBy(candidate: CandidateSummary, reviewer: string): boolean {
  return reviewer in candidate.verdicts;
}

export function selectionIndex(state: ViewState): number {
  return state.gallery.findIndex((c) => c.id === state.selectedId);
}

export function canSubmit(state: ViewState): boolean {
  return state.selectedId !== null && state.reviewer.length > 0;
}

/** Load a fetched page; a selection not present in it is cleared. */
export function pageLoaded(state: ViewState, data: CandidatePage): ViewState {
  const selectedStillHere = data.candidates.some((c) => c.id === state.selectedId);
  return {
    ...state,
    slideId: data.slide_id,
    page: data.page,
    totalPages: data.total_pages,
    total: data.total,
    gallery: data.candidates,
    selectedId: selectedStillHere ? state.selectedId : null,
    error: null,
  };
}

export function loadFailed(state: ViewState, message: string): ViewState {
  // retry banner only: the gallery and selection survive untouched
  return { ...state, error: message };
}

export function select(state: ViewState, candidateId: string | null): ViewState {
  if (candidateId === null) {
    return { ...state, selectedId: null };
  }
  if (!state.gallery.some((c) => c.id === candidateId)) {
    return state;
  }
  return { ...state, selectedId: candidateId };
}

export function selectByOffset(state: ViewState, offset: number): ViewState {
  if (state.gallery.length === 0) {
    return state;
  }
  const index = selectionIndex(state);
  const next = index < 0
    ? (offset > 0 ? 0 : state.gallery.length - 1)
    : Math.min(Math.max(index + offset, 0), state.gallery.length - 1);
  return { ...state, selectedId: state.gallery[next].id };
}

export function toggleOverlay(state: ViewState): ViewState {
  return { ...state, overlay: !state.overlay };
}

function nextUnreviewedId(state: ViewState, afterId: string): string | null {
  const start = state.gallery.findIndex((c) => c.id === afterId);
  const pendingIds = new Set(state.pending.map((p) => p.candidateId));
  const n = state.gallery.length;
  for (let step = 1; step <= n; step += 1) {
    const candidate = state.gallery[(start + step) % n];
    if (candidate.id === afterId) {
      continue;
    }
    if (!isReviewedBy(candidate, state.reviewer) && !pendingIds.has(candidate.id)) {
      return candidate.id;
    }
  }
  return null;
}

/**
 * Stage a verdict for the current selection: optimistic advance to the
 * next unreviewed candidate, POST to be issued by the caller. Returns
 * the unchanged state when submission is not allowed.
 */
export function submitVerdict(
  state: ViewState,
  decision: Decision,
): { state: ViewState; request: PendingVerdict | null } {
  if (!canSubmit(state)) {
    return { state, request: null };
  }
  const candidateId = state.selectedId as string;
  const request = { candidateId, decision };
  const advanced = nextUnreviewedId(state, candidateId);
  return {
    state: {
      ...state,
      pending: [...state.pending, request],
      selectedId: advanced ?? state.selectedId,
      error: null,
    },
    request,
  };
}

/** Server acknowledged: the optimistic badge becomes a real one. */
export function verdictAcked(state: ViewState, request: PendingVerdict): ViewState {
  return {
    ...state,
    pending: state.pending.filter((p) => p !== request),
    gallery: state.gallery.map((c) =>
      c.id === request.candidateId
        ? { ...c, verdicts: { ...c.verdicts, [state.reviewer]: request.decision } }
        : c,
    ),
  };
}

/** Server rejected or unreachable: revert status, reselect, surface it. */
export function verdictFailed(
  state: ViewState,
  request: PendingVerdict,
  message: string,
): ViewState {
  const stillInPage = state.gallery.some((c) => c.id === request.candidateId);
  return {
    ...state,
    pending: state.pending.filter((p) => p !== request),
    selectedId: stillInPage ? request.candidateId : state.selectedId,
    error: message,
  };
}

export function changePage(state: ViewState, delta: number): number {
  const target = state.page + delta;
  if (target < 1 || (state.totalPages > 0 && target > state.totalPages)) {
    return state.page;
  }
  return target;
}

export function reviewStatus(
  state: ViewState,
  candidate: CandidateSummary,
): 'pending' | Decision | null {
  if (state.pending.some((p) => p.candidateId === candidate.id)) {
    return 'pending';
  }
  return candidate.verdicts[state.reviewer] ?? null;
}
