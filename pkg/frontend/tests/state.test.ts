import { describe, expect, it } from 'vitest';

import {
  canSubmit,
  changePage,
  initialState,
  loadFailed,
  pageLoaded,
  reviewStatus,
  select,
  selectByOffset,
  submitVerdict,
  toggleOverlay,
  verdictAcked,
  verdictFailed,
  type ViewState,
} from '../src/state.js';
import type { CandidatePage, CandidateSummary } from '../src/types.js';

function summary(id: string, probability: number | null = 0.9,
                 verdicts: CandidateSummary['verdicts'] = {}): CandidateSummary {
  return { id, probability, rule_pass: true, fov: [0, 0], thumbnail: '', verdicts };
}

function page(ids: string[], pageNum = 1, totalPages = 1): CandidatePage {
  return {
    slide_id: 's1',
    page: pageNum,
    page_size: 20,
    total: ids.length,
    total_pages: totalPages,
    candidates: ids.map((id) => summary(id)),
  };
}

function loaded(ids: string[], reviewer = 'alice'): ViewState {
  return pageLoaded(initialState(reviewer), page(ids));
}

describe('page loading', () => {
  it('clears a selection that is not in the freshly loaded page', () => {
    let state = loaded(['a', 'b', 'c']);
    state = select(state, 'b');
    state = pageLoaded(state, page(['d', 'e']));
    expect(state.selectedId).toBeNull();
  });

  it('keeps a selection that is still present', () => {
    let state = loaded(['a', 'b']);
    state = select(state, 'b');
    state = pageLoaded(state, page(['b', 'c']));
    expect(state.selectedId).toBe('b');
  });

  it('load failure keeps gallery and selection (no state loss)', () => {
    let state = loaded(['a', 'b']);
    state = select(state, 'a');
    state = loadFailed(state, 'timeout');
    expect(state.error).toBe('timeout');
    expect(state.gallery).toHaveLength(2);
    expect(state.selectedId).toBe('a');
  });
});

describe('selection', () => {
  it('rejects ids outside the loaded page', () => {
    const state = select(loaded(['a']), 'zzz');
    expect(state.selectedId).toBeNull();
  });

  it('navigates by offset with clamping', () => {
    let state = loaded(['a', 'b', 'c']);
    state = selectByOffset(state, 1);
    expect(state.selectedId).toBe('a');
    state = selectByOffset(state, 1);
    expect(state.selectedId).toBe('b');
    state = selectByOffset(state, 5);
    expect(state.selectedId).toBe('c');
    state = selectByOffset(state, -10);
    expect(state.selectedId).toBe('a');
  });

  it('verdict controls disabled until a candidate is selected', () => {
    const state = loaded(['a']);
    expect(canSubmit(state)).toBe(false);
    expect(canSubmit(select(state, 'a'))).toBe(true);
  });

  it('requires a reviewer id', () => {
    const state = select(loaded(['a'], ''), 'a');
    expect(canSubmit(state)).toBe(false);
  });
});

describe('verdict flow', () => {
  it('submission stages the POST and advances to next unreviewed', () => {
    let state = select(loaded(['a', 'b', 'c']), 'a');
    const { state: next, request } = submitVerdict(state, 'ctc');
    expect(request).toEqual({ candidateId: 'a', decision: 'ctc' });
    expect(next.pending).toHaveLength(1);
    expect(next.selectedId).toBe('b'); // optimistic advance
  });

  it('advance skips candidates already reviewed by me or pending', () => {
    let state = pageLoaded(initialState('alice'), {
      ...page(['a', 'b', 'c', 'd']),
      candidates: [
        summary('a'),
        summary('b', 0.8, { alice: 'ctc' }),
        summary('c', 0.7, { bob: 'ctc' }),
        summary('d'),
      ],
    });
    state = select(state, 'a');
    const { state: next } = submitVerdict(state, 'artefact');
    expect(next.selectedId).toBe('c'); // b is mine already; c only bob's
  });

  it('stays put when no unreviewed candidate remains', () => {
    let state = pageLoaded(initialState('alice'), {
      ...page(['a', 'b']),
      candidates: [summary('a'), summary('b', 0.8, { alice: 'ctc' })],
    });
    state = select(state, 'a');
    const { state: next } = submitVerdict(state, 'ctc');
    expect(next.selectedId).toBe('a');
  });

  it('ack turns the optimistic badge into a stored verdict', () => {
    let state = select(loaded(['a', 'b']), 'a');
    const { state: staged, request } = submitVerdict(state, 'non-ctc');
    const acked = verdictAcked(staged, request!);
    expect(acked.pending).toHaveLength(0);
    const a = acked.gallery.find((c) => c.id === 'a')!;
    expect(a.verdicts.alice).toBe('non-ctc');
    expect(reviewStatus(acked, a)).toBe('non-ctc');
  });

  it('failure reverts status, reselects the candidate and surfaces the error', () => {
    let state = select(loaded(['a', 'b']), 'a');
    const { state: staged, request } = submitVerdict(state, 'ctc');
    expect(staged.selectedId).toBe('b');
    const failed = verdictFailed(staged, request!, 'verdict rejected (HTTP 422)');
    expect(failed.pending).toHaveLength(0);
    expect(failed.selectedId).toBe('a');
    expect(failed.error).toContain('422');
    const a = failed.gallery.find((c) => c.id === 'a')!;
    expect(reviewStatus(failed, a)).toBeNull(); // no badge survives
  });

  it('no submission without selection', () => {
    const { request } = submitVerdict(loaded(['a']), 'ctc');
    expect(request).toBeNull();
  });

  it('revising an earlier verdict overwrites my badge after ack', () => {
    let state = pageLoaded(initialState('alice'), {
      ...page(['a', 'b']),
      candidates: [summary('a', 0.5, { alice: 'ctc' }), summary('b')],
    });
    state = select(state, 'a');
    const { state: staged, request } = submitVerdict(state, 'artefact');
    const acked = verdictAcked(staged, request!);
    expect(acked.gallery[0].verdicts.alice).toBe('artefact');
  });
});

describe('misc transitions', () => {
  it('overlay toggles', () => {
    const state = initialState('r');
    expect(toggleOverlay(state).overlay).toBe(!state.overlay);
  });

  it('page change clamps to bounds', () => {
    let state = loaded(['a']);
    state = { ...state, page: 2, totalPages: 3 };
    expect(changePage(state, 1)).toBe(3);
    expect(changePage(state, -1)).toBe(1);
    expect(changePage({ ...state, page: 3 }, 1)).toBe(3);
    expect(changePage({ ...state, page: 1 }, -1)).toBe(1);
  });

  it('pending badge reported while a verdict is in flight', () => {
    let state = select(loaded(['a', 'b']), 'a');
    const { state: staged } = submitVerdict(state, 'ctc');
    const a = staged.gallery.find((c) => c.id === 'a')!;
    expect(reviewStatus(staged, a)).toBe('pending');
  });
});
