/** Per-tab session state. The service is the source of truth for votes;
 * this only tracks the opaque session token and per-query completion. */

import type { VoteChoice } from './api.js';

const SESSION_KEY = 'artpose-session';

export function getOrCreateSessionId(storage: Storage): string {
  const existing = storage.getItem(SESSION_KEY);
  if (existing) {
    return existing;
  }
  const token = `s-${Date.now().toString(36)}-${Math.random().toString(36).slice(2, 10)}`;
  storage.setItem(SESSION_KEY, token);
  return token;
}

export interface CardState {
  resultId: string;
  vote: VoteChoice | null;
}

export class SessionState {
  readonly sessionId: string;
  private completion = new Map<string, number>();

  constructor(sessionId: string) {
    this.sessionId = sessionId;
  }

  /** Count of voted cards for a query; complete when every card is voted. */
  recordProgress(queryId: string, cards: CardState[]): void {
    this.completion.set(queryId, cards.filter((c) => c.vote !== null).length);
  }

  votedCount(queryId: string): number {
    return this.completion.get(queryId) ?? 0;
  }

  isComplete(queryId: string, totalCards: number): boolean {
    return totalCards > 0 && this.votedCount(queryId) === totalCards;
  }
}
