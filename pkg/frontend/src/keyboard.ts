/** Keyboard map: every review action is reachable without a mouse. */

import type { Decision } from './types.js';

export type Action =
  | { kind: 'navigate'; offset: number }
  | { kind: 'page'; delta: number }
  | { kind: 'verdict'; decision: Decision }
  | { kind: 'overlay' };

export function actionForKey(key: string): Action | null {
  switch (key) {
    case 'ArrowRight':
    case 'j':
    case 'J':
      return { kind: 'navigate', offset: 1 };
    case 'ArrowLeft':
    case 'k':
    case 'K':
      return { kind: 'navigate', offset: -1 };
    case 'PageDown':
    case ']':
      return { kind: 'page', delta: 1 };
    case 'PageUp':
    case '[':
      return { kind: 'page', delta: -1 };
    case 'c':
    case 'C':
      return { kind: 'verdict', decision: 'ctc' };
    case 'n':
    case 'N':
      return { kind: 'verdict', decision: 'non-ctc' };
    case 'a':
    case 'A':
      return { kind: 'verdict', decision: 'artefact' };
    case 'o':
    case 'O':
      return { kind: 'overlay' };
    default:
      return null;
  }
}
