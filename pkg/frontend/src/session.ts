/**
 * Session controller: applies state transitions and talks to the service.
 *
 * Searches carry a sequence number. Submitting again supersedes whatever is
 * still in flight; a response (or error) whose number is no longer the latest
 * is dropped without touching the state, so the grid always shows the newest
 * query and never flickers backwards.
 */

import { errorMessage } from './api.js';
import * as transitions from './state.js';
import type { Reference, SearchResponse, SessionState } from './types.js';

export interface SearchService {
  search(
    reference: Reference,
    modification: string,
    topK: number,
  ): Promise<SearchResponse>;
}

export const DEFAULT_TOP_K = 12;

export class Session {
  private current: SessionState = transitions.initialState();
  private lastIssued = 0;

  constructor(
    private readonly service: SearchService,
    private readonly onChange: (state: SessionState) => void,
    private readonly topK: number = DEFAULT_TOP_K,
  ) {}

  get state(): SessionState {
    return this.current;
  }

  pick(reference: Reference): void {
    this.commit(transitions.pickReference(this.current, reference));
  }

  edit(text: string): void {
    this.commit(transitions.editModification(this.current, text));
  }

  promote(id: string): void {
    this.commit(transitions.promoteResult(this.current, id));
  }

  back(): void {
    this.commit(transitions.goBack(this.current));
  }

  /** Issue the composed query; a no-op until the composer is complete. */
  async search(): Promise<void> {
    if (!transitions.canSearch(this.current)) {
      return;
    }
    const query = {
      reference: this.current.reference as Reference,
      modification: this.current.modification,
    };
    const seq = ++this.lastIssued;
    this.commit(transitions.searchStarted(this.current));
    let response: SearchResponse;
    try {
      response = await this.service.search(query.reference, query.modification, this.topK);
    } catch (err) {
      if (seq === this.lastIssued) {
        this.commit(transitions.searchFailed(this.current, errorMessage(err)));
      }
      return;
    }
    if (seq !== this.lastIssued) {
      return;
    }
    this.commit(transitions.searchSucceeded(this.current, query, response));
  }

  private commit(next: SessionState): void {
    this.current = next;
    this.onChange(next);
  }
}
