/** Thin typed client over the review HTTP endpoints.
 *
 * The fetch implementation is injectable so tests can run without a
 * server; errors carry the HTTP status for the caller's retry logic.
 */

import type {
  CandidateDetail,
  CandidatePage,
  Decision,
  ReviewReport,
  SlideSummary,
} from './types.js';

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

export class ReviewApiClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async get<T>(path: string): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(`${this.baseUrl}${path}`);
    } catch (err) {
      throw new ApiError(0, `network failure: ${String(err)}`);
    }
    if (!response.ok) {
      throw new ApiError(response.status, `${path} -> HTTP ${response.status}`);
    }
    return (await response.json()) as T;
  }

  listSlides(): Promise<SlideSummary[]> {
    return this.get('/slides');
  }

  listCandidates(
    slideId: string,
    page = 1,
    pageSize = 20,
    sort: 'probability' | 'id' = 'probability',
  ): Promise<CandidatePage> {
    const params = new URLSearchParams({
      page: String(page),
      page_size: String(pageSize),
      sort,
    });
    return this.get(`/slides/${encodeURIComponent(slideId)}/candidates?${params}`);
  }

  getCandidate(candidateId: string): Promise<CandidateDetail> {
    return this.get(`/candidates/${encodeURIComponent(candidateId)}`);
  }

  report(slideId: string): Promise<ReviewReport> {
    return this.get(`/slides/${encodeURIComponent(slideId)}/report`);
  }

  imageUrl(candidateId: string, kind: string): string {
    return `${this.baseUrl}/candidates/${encodeURIComponent(candidateId)}/image/${kind}`;
  }

  async postVerdict(
    candidateId: string,
    decision: Decision,
    reviewer: string,
  ): Promise<void> {
    let response: Response;
    try {
      response = await this.fetchImpl(
        `${this.baseUrl}/candidates/${encodeURIComponent(candidateId)}/verdict`,
        {
          method: 'POST',
          headers: { 'content-type': 'application/json' },
          body: JSON.stringify({ decision, reviewer }),
        },
      );
    } catch (err) {
      throw new ApiError(0, `network failure: ${String(err)}`);
    }
    if (!response.ok) {
      throw new ApiError(response.status, `verdict -> HTTP ${response.status}`);
    }
  }
}
