/** UI behavior against a scripted in-memory service double. */

import { beforeEach, describe, expect, it, vi } from 'vitest';

import type { NdcgResponse, QueryInfo, SearchResponse, VoteChoice } from '../src/api.js';
import { ApiClient } from '../src/api.js';
import { App } from '../src/app.js';
import { SessionState } from '../src/state.js';

class FakeApi extends ApiClient {
  queries: QueryInfo[] = [];
  votes = new Map<string, VoteChoice>();
  failVotes = false;
  failQueries = false;
  ndcgValue = 0.5;

  constructor(nResults = 20) {
    super('');
    this.queries = [
      { query_id: 'q:0', thumbnail: '/thumbnails/q0.png' },
      { query_id: 'q:1', thumbnail: '/thumbnails/q1.png' },
    ];
    this.nResults = nResults;
  }

  private nResults: number;

  override async listQueries(): Promise<QueryInfo[]> {
    if (this.failQueries) {
      throw new Error('down');
    }
    return this.queries;
  }

  override async search(queryId: string, k: number): Promise<SearchResponse> {
    const results = Array.from({ length: Math.min(k, this.nResults) }, (_, i) => ({
      result_id: `r:${i}`,
      rank: i + 1,
      distance: i * 0.1,
      thumbnail: `/thumbnails/r${i}.png`,
      vote: this.votes.get(`${queryId}|r:${i}`) ?? null,
    }));
    return { query_id: queryId, k, results };
  }

  override async ndcg(queryId: string, k: number): Promise<NdcgResponse> {
    if (this.votes.size === 0) {
      return { query_id: queryId, k, status: 'insufficient data', ndcg: null, voted: 0 };
    }
    return { query_id: queryId, k, status: 'ok', ndcg: this.ndcgValue, voted: this.votes.size };
  }

  override async vote(
    _session: string,
    queryId: string,
    resultId: string,
    vote: VoteChoice,
  ): Promise<void> {
    if (this.failVotes) {
      throw new Error('vote rejected');
    }
    this.votes.set(`${queryId}|${resultId}`, vote);
  }
}

async function makeApp(api: FakeApi): Promise<{ root: HTMLElement; app: App }> {
  document.body.innerHTML = '<div id="app"></div>';
  const root = document.getElementById('app') as HTMLElement;
  const app = new App(root, api, new SessionState('s-test'), { topK: 20 });
  await app.start();
  return { root, app };
}

describe('query gallery', () => {
  it('renders one tile per configured query', async () => {
    const { root } = await makeApp(new FakeApi());
    expect(root.querySelectorAll('.query-tile')).toHaveLength(2);
  });

  it('ten configured study queries give ten tiles', async () => {
    const api = new FakeApi();
    api.queries = Array.from({ length: 10 }, (_, i) => ({
      query_id: `q:${i}`,
      thumbnail: `/thumbnails/q${i}.png`,
    }));
    const { root } = await makeApp(api);
    expect(root.querySelectorAll('.query-tile')).toHaveLength(10);
  });

  it('shows an explicit empty state', async () => {
    const api = new FakeApi();
    api.queries = [];
    const { root } = await makeApp(api);
    expect(root.querySelector('.empty-state')?.textContent).toMatch(/no query poses/i);
  });

  it('unreachable service raises the retry banner', async () => {
    const api = new FakeApi();
    api.failQueries = true;
    const { root } = await makeApp(api);
    const banner = root.querySelector('[data-role="banner"]') as HTMLElement;
    expect(banner.classList.contains('hidden')).toBe(false);
    expect(banner.querySelector('button')?.textContent).toBe('retry');

    api.failQueries = false;
    banner.querySelector('button')?.click();
    await new Promise((r) => setTimeout(r, 0));
    expect(root.querySelectorAll('.query-tile')).toHaveLength(2);
  });
});

describe('query view', () => {
  it('card order equals service rank order and is never reordered', async () => {
    const api = new FakeApi();
    const { root, app } = await makeApp(api);
    await app.openQuery('q:0');
    const ranks = Array.from(root.querySelectorAll('.card .meta')).map((m) =>
      Number((m.textContent ?? '').match(/rank (\d+)/)?.[1]),
    );
    expect(ranks).toEqual(Array.from({ length: 20 }, (_, i) => i + 1));
  });

  it('vote paints the card and updates completion', async () => {
    const api = new FakeApi(3);
    const { root, app } = await makeApp(api);
    await app.openQuery('q:0');
    for (let i = 0; i < 3; i++) {
      await app.vote(i, 'relevant');
    }
    const active = root.querySelectorAll('.votes button.active');
    expect(active).toHaveLength(3);
    expect(root.querySelector('[data-role="progress"]')?.textContent).toMatch(/complete/);
  });

  it('failed vote reverts the optimistic update and shows a banner', async () => {
    const api = new FakeApi(3);
    const { root, app } = await makeApp(api);
    await app.openQuery('q:0');
    api.failVotes = true;
    await app.vote(0, 'relevant');
    expect(root.querySelectorAll('.votes button.active')).toHaveLength(0);
    const banner = root.querySelector('[data-role="banner"]') as HTMLElement;
    expect(banner.classList.contains('hidden')).toBe(false);
  });

  it('re-voting replaces the active choice (single stored vote)', async () => {
    const api = new FakeApi(3);
    const { root, app } = await makeApp(api);
    await app.openQuery('q:0');
    await app.vote(0, 'relevant');
    await app.vote(0, 'irrelevant');
    const card = root.querySelectorAll('.card')[0];
    const active = card.querySelectorAll('button.active');
    expect(active).toHaveLength(1);
    expect((active[0] as HTMLElement).dataset.vote).toBe('irrelevant');
    expect(api.votes.get('q:0|r:0')).toBe('irrelevant');
  });

  it('NDCG panel refreshes after votes', async () => {
    const api = new FakeApi(3);
    api.ndcgValue = 0.731;
    const { root, app } = await makeApp(api);
    await app.openQuery('q:0');
    expect(root.querySelector('[data-role="ndcg"]')?.textContent).toMatch(/insufficient data/);
    await app.vote(0, 'relevant');
    expect(root.querySelector('[data-role="ndcg-value"]')?.textContent).toBe('0.7310');
    expect(root.querySelector('[data-role="ndcg"]')?.textContent).toMatch(/your session/);
  });

  it('reload reconstructs vote state from the service', async () => {
    const api = new FakeApi(3);
    {
      const { app } = await makeApp(api);
      await app.openQuery('q:0');
      await app.vote(1, 'indifferent');
    }
    // fresh app instance, same service: the vote must come back
    const { root, app } = await makeApp(api);
    await app.openQuery('q:0');
    const card = root.querySelectorAll('.card')[1];
    expect((card.querySelector('button.active') as HTMLElement).dataset.vote).toBe('indifferent');
  });

  it('keyboard shortcuts vote on the focused card', async () => {
    const api = new FakeApi(3);
    const { app } = await makeApp(api);
    await app.openQuery('q:0');
    document.dispatchEvent(new KeyboardEvent('keydown', { key: '1' }));
    await new Promise((r) => setTimeout(r, 0));
    expect(api.votes.get('q:0|r:0')).toBe('relevant');
  });
});
