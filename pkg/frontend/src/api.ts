/**
 * Thin HTTP client for the retrieval service. The whole coupling between the
 * UI and the backend lives here: GET /health, POST /search (JSON for indexed
 * references, multipart for uploads) and the /images/{id} URL scheme.
 */

import type { HealthInfo, Reference, SearchResponse } from './types.js';

export class ServiceError extends Error {
  constructor(
    message: string,
    readonly status: number,
  ) {
    super(message);
    this.name = 'ServiceError';
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ServiceClient {
  constructor(
    private readonly baseUrl: string = '',
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  /** Absolute URL for an image, from either a bare id or a service path. */
  imageUrl(pathOrId: string): string {
    const path = pathOrId.startsWith('/')
      ? pathOrId
      : `/images/${encodeURIComponent(pathOrId)}`;
    return this.baseUrl + path;
  }

  async health(): Promise<HealthInfo> {
    const response = await this.fetchFn(`${this.baseUrl}/health`);
    return readJson<HealthInfo>(response);
  }

  async search(
    reference: Reference,
    modification: string,
    topK: number,
  ): Promise<SearchResponse> {
    let init: RequestInit;
    if (reference.kind === 'gallery') {
      init = {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({
          reference_id: reference.id,
          modification,
          top_k: topK,
        }),
      };
    } else {
      const form = new FormData();
      form.append('image_upload', reference.file, reference.name);
      form.append('modification', modification);
      form.append('top_k', String(topK));
      init = { method: 'POST', body: form };
    }
    const response = await this.fetchFn(`${this.baseUrl}/search`, init);
    return readJson<SearchResponse>(response);
  }
}

async function readJson<T>(response: Response): Promise<T> {
  let body: unknown = null;
  try {
    body = await response.json();
  } catch {
    body = null;
  }
  if (!response.ok) {
    const detail =
      body !== null && typeof body === 'object' && 'error' in body
        ? String((body as { error: unknown }).error)
        : `HTTP ${response.status}`;
    throw new ServiceError(detail, response.status);
  }
  return body as T;
}

export function errorMessage(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}
