/** Typed client for the retrieval/voting service. Field names are wire contract. */

export type VoteChoice = 'relevant' | 'indifferent' | 'irrelevant';

export interface QueryInfo {
  query_id: string;
  thumbnail: string;
}

export interface SearchResult {
  result_id: string;
  rank: number;
  distance: number;
  thumbnail: string;
  vote: VoteChoice | null;
}

export interface SearchResponse {
  query_id: string;
  k: number;
  results: SearchResult[];
}

export interface NdcgResponse {
  query_id: string;
  k: number;
  status: 'ok' | 'insufficient data';
  ndcg: number | null;
  voted: number;
}

export class ApiError extends Error {
  constructor(message: string, readonly status?: number) {
    super(message);
  }
}

async function getJson<T>(url: string): Promise<T> {
  let response: Response;
  try {
    response = await fetch(url);
  } catch (err) {
    throw new ApiError(`service unreachable: ${String(err)}`);
  }
  if (!response.ok) {
    throw new ApiError(`request failed: ${url}`, response.status);
  }
  return (await response.json()) as T;
}

export class ApiClient {
  constructor(private readonly base: string = '') {}

  listQueries(): Promise<QueryInfo[]> {
    return getJson<QueryInfo[]>(`${this.base}/queries`);
  }

  search(queryId: string, k: number, sessionId: string): Promise<SearchResponse> {
    const params = new URLSearchParams({ query_id: queryId, k: String(k), session_id: sessionId });
    return getJson<SearchResponse>(`${this.base}/search?${params}`);
  }

  ndcg(queryId: string, k: number, sessionId: string): Promise<NdcgResponse> {
    const params = new URLSearchParams({ query_id: queryId, k: String(k), session_id: sessionId });
    return getJson<NdcgResponse>(`${this.base}/ndcg?${params}`);
  }

  async vote(sessionId: string, queryId: string, resultId: string, vote: VoteChoice): Promise<void> {
    let response: Response;
    try {
      response = await fetch(`${this.base}/votes`, {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({
          session_id: sessionId,
          query_id: queryId,
          result_id: resultId,
          vote,
        }),
      });
    } catch (err) {
      throw new ApiError(`service unreachable: ${String(err)}`);
    }
    if (!response.ok) {
      throw new ApiError('vote rejected', response.status);
    }
  }
}
