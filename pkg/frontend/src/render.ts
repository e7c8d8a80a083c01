/**
 * HTML string builders. Results render strictly in response order; no
 * sorting, filtering or score math happens on the client.
 */

import { canSearch } from './state.js';
import type {
  HealthInfo,
  Reference,
  SearchResponse,
  SessionState,
} from './types.js';

/** Turns references and service image paths into displayable URLs. */
export interface UrlResolver {
  image(pathOrId: string): string;
  reference(ref: Reference): string | null;
}

export function escapeHtml(str: string): string {
  return str
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;');
}

export function escapeAttr(str: string): string {
  return escapeHtml(str).replace(/'/g, '&#39;');
}

export function referenceLabel(ref: Reference | null): string {
  if (ref === null) {
    return 'none';
  }
  return ref.kind === 'gallery' ? ref.id : `upload: ${ref.name}`;
}

export function renderHealth(health: HealthInfo | null): string {
  if (health === null) {
    return `<span class="health offline">service unreachable</span>`;
  }
  return `<span class="health ok">${escapeHtml(health.backbone)} backbone, ${health.index_size} images indexed</span>`;
}

export function renderNotice(state: SessionState): string {
  if (state.notice === null) {
    return '';
  }
  return `<div class="banner" role="alert">${escapeHtml(state.notice)}</div>`;
}

export function renderComposer(state: SessionState, urls: UrlResolver): string {
  const ref = state.reference;
  const previewUrl = ref === null ? null : urls.reference(ref);
  const preview =
    previewUrl === null
      ? `<div class="ref-placeholder">no reference selected</div>`
      : `<img class="ref-preview" src="${escapeAttr(previewUrl)}" alt="${escapeAttr(referenceLabel(ref))}" />`;
  const searchDisabled = canSearch(state) ? '' : ' disabled';
  const backDisabled = state.history.length > 1 || state.cursor !== null ? '' : ' disabled';
  return `
    <section class="composer">
      <div class="reference">
        ${preview}
        <div class="ref-label">${escapeHtml(referenceLabel(ref))}</div>
        <div class="ref-pickers">
          <input id="reference-id" type="text" placeholder="indexed image id" />
          <button type="button" id="use-id">use id</button>
          <label class="upload">
            upload<input id="upload-file" type="file" accept="image/*" />
          </label>
        </div>
      </div>
      <div class="query">
        <input
          id="modification"
          type="text"
          placeholder="describe the change, e.g. make it long sleeved"
          value="${escapeAttr(state.modification)}"
        />
        <button type="button" id="search"${searchDisabled}>${state.pending ? 'searching...' : 'search'}</button>
        <button type="button" id="back"${backDisabled}>back</button>
      </div>
    </section>`;
}

export function renderResults(
  response: SearchResponse | null,
  urls: UrlResolver,
): string {
  if (response === null) {
    return `<div class="empty">Pick a reference image and describe the change.</div>`;
  }
  if (response.results.length === 0) {
    return `<div class="empty">No results.</div>`;
  }
  const cards = response.results
    .map(
      (result, i) => `
      <figure class="card" data-result-id="${escapeAttr(result.id)}">
        <img src="${escapeAttr(urls.image(result.image_url))}" alt="${escapeAttr(result.id)}" loading="lazy" />
        <figcaption>
          <span class="rank">#${i + 1}</span>
          <span class="result-id">${escapeHtml(result.id)}</span>
          <span class="score">${result.score.toFixed(3)}</span>
        </figcaption>
        <button type="button" data-promote="${escapeAttr(result.id)}">use as reference</button>
      </figure>`,
    )
    .join('');
  return `
    <section class="results">
      <div class="timing">${response.results.length} results in ${response.timing_ms.toFixed(1)} ms</div>
      <div class="grid">${cards}</div>
    </section>`;
}

export function renderHistory(state: SessionState): string {
  if (state.history.length === 0) {
    return '';
  }
  const rows = state.history
    .map((entry, i) => {
      const current = state.cursor === i ? ' class="current"' : '';
      const top = entry.topIds.slice(0, 3).join(', ');
      return `<li${current}><span class="h-ref">${escapeHtml(referenceLabel(entry.query.reference))}</span> + &quot;${escapeHtml(entry.query.modification)}&quot; &rarr; ${escapeHtml(top)}</li>`;
    })
    .join('');
  return `
    <aside class="history">
      <h2>session history</h2>
      <ol>${rows}</ol>
    </aside>`;
}

export function renderApp(
  state: SessionState,
  health: HealthInfo | null,
  urls: UrlResolver,
): string {
  return `
    <header>
      <h1>composed image search</h1>
      ${renderHealth(health)}
    </header>
    ${renderNotice(state)}
    ${renderComposer(state, urls)}
    ${renderResults(state.lastResponse, urls)}
    ${renderHistory(state)}`;
}
