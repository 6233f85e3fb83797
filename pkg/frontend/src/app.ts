/** Retrieval browser and voting instrument.
 *
 * One query gallery, one query view with the ranked result cards, a
 * three-way vote toggle per card, and a live NDCG panel computed by the
 * service from this session's votes. Results are never reordered on the
 * client: displayed rank always equals service rank.
 */

import { ApiClient, ApiError, QueryInfo, SearchResult, VoteChoice } from './api.js';
import { SessionState } from './state.js';

const VOTE_CHOICES: VoteChoice[] = ['relevant', 'indifferent', 'irrelevant'];
const VOTE_KEYS: Record<string, VoteChoice> = {
  '1': 'relevant',
  '2': 'indifferent',
  '3': 'irrelevant',
};

export interface AppOptions {
  topK?: number;
}

export class App {
  private readonly topK: number;
  private cards: SearchResult[] = [];
  private currentQuery: string | null = null;
  private focusIndex = 0;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ApiClient,
    private readonly session: SessionState,
    options: AppOptions = {},
  ) {
    this.topK = options.topK ?? 20;
  }

  async start(): Promise<void> {
    this.renderShell();
    await this.loadGallery();
  }

  // ------------------------------------------------------------- shell --

  private renderShell(): void {
    this.root.innerHTML = `
      <header class="topbar">
        <h1>Pose retrieval study</h1>
        <span class="session" data-role="session"></span>
      </header>
      <div class="banner hidden" data-role="banner"></div>
      <section class="instructions" data-role="instructions">
        <p>Pick a query pose below, then judge each of its retrieved results as
        <strong>relevant</strong>, <strong>indifferent</strong>, or
        <strong>irrelevant</strong> to the query pose. Keyboard: arrows move,
        1/2/3 vote. Your judgments are stored under an anonymous session token.</p>
      </section>
      <main>
        <section class="gallery" data-role="gallery"></section>
        <section class="query-view hidden" data-role="query-view"></section>
      </main>`;
    const sessionEl = this.part('session');
    sessionEl.textContent = `session ${this.session.sessionId}`;
    document.addEventListener('keydown', (ev) => this.onKey(ev));
  }

  private part(role: string): HTMLElement {
    const el = this.root.querySelector(`[data-role="${role}"]`);
    if (!el) {
      throw new Error(`missing UI part ${role}`);
    }
    return el as HTMLElement;
  }

  private showBanner(message: string, retry?: () => void): void {
    const banner = this.part('banner');
    banner.classList.remove('hidden');
    banner.innerHTML = '';
    banner.append(message);
    if (retry) {
      const button = document.createElement('button');
      button.textContent = 'retry';
      button.addEventListener('click', () => {
        banner.classList.add('hidden');
        retry();
      });
      banner.append(' ', button);
    }
  }

  // ----------------------------------------------------------- gallery --

  private async loadGallery(): Promise<void> {
    const gallery = this.part('gallery');
    let queries: QueryInfo[];
    try {
      queries = await this.api.listQueries();
    } catch (err) {
      this.showBanner(`could not load queries (${(err as ApiError).message})`, () =>
        void this.loadGallery(),
      );
      return;
    }
    gallery.innerHTML = '';
    if (queries.length === 0) {
      const empty = document.createElement('p');
      empty.className = 'empty-state';
      empty.textContent = 'No query poses are configured.';
      gallery.append(empty);
      return;
    }
    for (const query of queries) {
      const tile = document.createElement('button');
      tile.className = 'query-tile';
      tile.dataset.queryId = query.query_id;
      tile.innerHTML = `<img src="${query.thumbnail}" alt="query ${query.query_id}">
        <span>${query.query_id}</span>`;
      tile.addEventListener('click', () => void this.openQuery(query.query_id));
      gallery.append(tile);
    }
  }

  // -------------------------------------------------------- query view --

  async openQuery(queryId: string): Promise<void> {
    let response;
    try {
      response = await this.api.search(queryId, this.topK, this.session.sessionId);
    } catch (err) {
      this.showBanner(`could not load results (${(err as ApiError).message})`, () =>
        void this.openQuery(queryId),
      );
      return;
    }
    this.currentQuery = queryId;
    this.cards = response.results;
    this.focusIndex = 0;
    this.session.recordProgress(
      queryId,
      this.cards.map((c) => ({ resultId: c.result_id, vote: c.vote })),
    );

    const view = this.part('query-view');
    view.classList.remove('hidden');
    view.innerHTML = `
      <div class="query-head">
        <button data-role="back">&larr; all queries</button>
        <h2>Query ${queryId}</h2>
        <div class="ndcg-panel" data-role="ndcg">NDCG@${this.topK}: &ndash;
          <small>based on your session's votes</small></div>
        <div class="progress" data-role="progress"></div>
      </div>
      <div class="cards" data-role="cards"></div>`;
    this.part('back').addEventListener('click', () => {
      view.classList.add('hidden');
      this.currentQuery = null;
    });

    const cardsEl = this.part('cards');
    this.cards.forEach((result, i) => cardsEl.append(this.renderCard(result, i)));
    this.updateProgress();
    await this.refreshNdcg();
  }

  private renderCard(result: SearchResult, index: number): HTMLElement {
    const card = document.createElement('div');
    card.className = 'card';
    card.tabIndex = 0;
    card.dataset.resultId = result.result_id;
    card.dataset.index = String(index);
    card.innerHTML = `
      <img src="${result.thumbnail}" alt="result ${result.result_id}">
      <div class="meta">rank ${result.rank} &middot; d=${result.distance.toFixed(3)}</div>
      <div class="votes"></div>`;
    const votesEl = card.querySelector('.votes') as HTMLElement;
    for (const choice of VOTE_CHOICES) {
      const button = document.createElement('button');
      button.textContent = choice;
      button.dataset.vote = choice;
      button.className = result.vote === choice ? 'active' : '';
      button.addEventListener('click', () => void this.vote(index, choice));
      votesEl.append(button);
    }
    card.addEventListener('focus', () => {
      this.focusIndex = index;
    });
    return card;
  }

  /** Optimistic toggle; on failure the previous state is restored. */
  async vote(index: number, choice: VoteChoice): Promise<void> {
    if (this.currentQuery === null) {
      return;
    }
    const card = this.cards[index];
    const previous = card.vote;
    card.vote = choice;
    this.paintCard(index);
    try {
      await this.api.vote(this.session.sessionId, this.currentQuery, card.result_id, choice);
    } catch (err) {
      card.vote = previous;
      this.paintCard(index);
      this.showBanner(`vote failed (${(err as ApiError).message})`);
      return;
    }
    this.session.recordProgress(
      this.currentQuery,
      this.cards.map((c) => ({ resultId: c.result_id, vote: c.vote })),
    );
    this.updateProgress();
    await this.refreshNdcg();
  }

  private paintCard(index: number): void {
    const card = this.part('cards').children[index] as HTMLElement;
    const vote = this.cards[index].vote;
    card.querySelectorAll('button[data-vote]').forEach((b) => {
      const button = b as HTMLButtonElement;
      button.className = button.dataset.vote === vote ? 'active' : '';
    });
  }

  private updateProgress(): void {
    if (this.currentQuery === null) {
      return;
    }
    const progress = this.part('progress');
    const voted = this.session.votedCount(this.currentQuery);
    const complete = this.session.isComplete(this.currentQuery, this.cards.length);
    progress.textContent = complete
      ? `complete (${voted}/${this.cards.length})`
      : `${voted}/${this.cards.length} voted`;
    progress.classList.toggle('complete', complete);
  }

  private async refreshNdcg(): Promise<void> {
    if (this.currentQuery === null) {
      return;
    }
    const panel = this.part('ndcg');
    try {
      const out = await this.api.ndcg(this.currentQuery, this.topK, this.session.sessionId);
      const value = out.status === 'ok' && out.ndcg !== null ? out.ndcg.toFixed(4) : 'insufficient data';
      panel.innerHTML = `NDCG@${this.topK}: <strong data-role="ndcg-value">${value}</strong>
        <small>based on your session's votes</small>`;
    } catch {
      panel.textContent = 'NDCG unavailable';
    }
  }

  // ---------------------------------------------------------- keyboard --

  private onKey(ev: KeyboardEvent): void {
    if (this.currentQuery === null || this.cards.length === 0) {
      return;
    }
    if (ev.key in VOTE_KEYS) {
      void this.vote(this.focusIndex, VOTE_KEYS[ev.key]);
      ev.preventDefault();
      return;
    }
    if (ev.key === 'ArrowRight' || ev.key === 'ArrowDown') {
      this.focusIndex = Math.min(this.focusIndex + 1, this.cards.length - 1);
    } else if (ev.key === 'ArrowLeft' || ev.key === 'ArrowUp') {
      this.focusIndex = Math.max(this.focusIndex - 1, 0);
    } else {
      return;
    }
    const el = this.part('cards').children[this.focusIndex] as HTMLElement | undefined;
    el?.focus();
    ev.preventDefault();
  }
}
