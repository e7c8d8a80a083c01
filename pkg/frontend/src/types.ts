/** Wire types of the retrieval service plus the session model built on them. */

export interface SearchResult {
  id: string;
  score: number;
  image_url: string;
}

export interface QueryEcho {
  reference_id: string | null;
  modification: string;
  top_k: number;
  uploaded: boolean;
}

export interface SearchResponse {
  results: SearchResult[];
  query_echo: QueryEcho;
  timing_ms: number;
}

export interface HealthInfo {
  status: string;
  index_size: number;
  backbone: string;
  config_hash: string;
}

/** Reference image for the next query: an indexed id or a local upload. */
export type Reference =
  | { kind: 'gallery'; id: string }
  | { kind: 'upload'; file: Blob; name: string };

/** What was asked, kept verbatim so a past query can be reloaded. */
export interface QueryRecord {
  reference: Reference;
  modification: string;
}

export interface HistoryEntry {
  query: QueryRecord;
  topIds: string[];
}

export interface SessionState {
  reference: Reference | null;
  modification: string;
  lastResponse: SearchResponse | null;
  /** One entry per completed search, append-only for the whole session. */
  history: HistoryEntry[];
  /** History index loaded into the composer while stepping back; null = live. */
  cursor: number | null;
  pending: boolean;
  /** Inline banner text: search errors, stale-promote notices. */
  notice: string | null;
}
