/**
 * Session state transitions, kept pure so tests can script whole sessions.
 *
 * The composer holds a reference plus a modification text; every completed
 * search appends one history entry and nothing ever removes or edits past
 * entries. Stepping back only loads an old query into the composer.
 */

import type {
  HistoryEntry,
  QueryRecord,
  Reference,
  SearchResponse,
  SessionState,
} from './types.js';

export function initialState(): SessionState {
  return {
    reference: null,
    modification: '',
    lastResponse: null,
    history: [],
    cursor: null,
    pending: false,
    notice: null,
  };
}

/** A search needs a reference and a non-blank modification. */
export function canSearch(state: SessionState): boolean {
  return state.reference !== null && state.modification.trim().length > 0;
}

export function pickReference(state: SessionState, reference: Reference): SessionState {
  return { ...state, reference, cursor: null, notice: null };
}

export function editModification(state: SessionState, text: string): SessionState {
  return { ...state, modification: text, cursor: null };
}

export function searchStarted(state: SessionState): SessionState {
  return { ...state, pending: true, notice: null };
}

export function searchSucceeded(
  state: SessionState,
  query: QueryRecord,
  response: SearchResponse,
): SessionState {
  const entry: HistoryEntry = {
    query,
    topIds: response.results.map((result) => result.id),
  };
  return {
    ...state,
    lastResponse: response,
    history: [...state.history, entry],
    cursor: null,
    pending: false,
    notice: null,
  };
}

export function searchFailed(state: SessionState, message: string): SessionState {
  return { ...state, pending: false, notice: message };
}

/**
 * Make a result from the current grid the next reference. Ids that are no
 * longer on screen leave everything untouched apart from a notice.
 */
export function promoteResult(state: SessionState, id: string): SessionState {
  const onScreen =
    state.lastResponse !== null &&
    state.lastResponse.results.some((result) => result.id === id);
  if (!onScreen) {
    return { ...state, notice: `result '${id}' is not in the current results` };
  }
  return {
    ...state,
    reference: { kind: 'gallery', id },
    modification: '',
    cursor: null,
    notice: null,
  };
}

/** Reload the query before the one currently shown into the composer. */
export function goBack(state: SessionState): SessionState {
  const position = state.cursor ?? state.history.length - 1;
  const target = position - 1;
  if (target < 0 || state.history.length === 0) {
    return { ...state, notice: 'already at the first query of this session' };
  }
  const query = state.history[target].query;
  return {
    ...state,
    reference: query.reference,
    modification: query.modification,
    cursor: target,
    notice: null,
  };
}
