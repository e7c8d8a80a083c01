/**
 * Browser bootstrap: owns the DOM, delegates everything else to the session
 * controller and the render functions. The service origin comes from the
 * ?service= query parameter and defaults to the page's own origin.
 */

import { ServiceClient } from './api.js';
import { renderApp, type UrlResolver } from './render.js';
import { Session } from './session.js';
import type { HealthInfo, Reference, SessionState } from './types.js';

const root = document.getElementById('app');
if (root === null) {
  throw new Error('missing #app element');
}

const params = new URLSearchParams(window.location.search);
const client = new ServiceClient(params.get('service') ?? '');

let health: HealthInfo | null = null;
let uploadUrl: string | null = null;
let uploadBlob: Blob | null = null;

const urls: UrlResolver = {
  image: (pathOrId) => client.imageUrl(pathOrId),
  reference: (ref) => {
    if (ref.kind === 'gallery') {
      return client.imageUrl(ref.id);
    }
    if (uploadBlob !== ref.file) {
      if (uploadUrl !== null) {
        URL.revokeObjectURL(uploadUrl);
      }
      uploadUrl = URL.createObjectURL(ref.file);
      uploadBlob = ref.file;
    }
    return uploadUrl;
  },
};

function paint(state: SessionState): void {
  root!.innerHTML = renderApp(state, health, urls);
}

const session = new Session(client, paint);

root.addEventListener('click', (event) => {
  const target = event.target as HTMLElement;
  const promoteId = target.getAttribute('data-promote');
  if (promoteId !== null) {
    session.promote(promoteId);
    return;
  }
  if (target.id === 'search') {
    void session.search();
    return;
  }
  if (target.id === 'back') {
    session.back();
    return;
  }
  if (target.id === 'use-id') {
    const field = document.getElementById('reference-id') as HTMLInputElement | null;
    const id = field?.value.trim() ?? '';
    if (id.length > 0) {
      session.pick({ kind: 'gallery', id });
    }
  }
});

root.addEventListener('input', (event) => {
  const target = event.target as HTMLElement;
  if (target.id !== 'modification') {
    return;
  }
  const field = target as HTMLInputElement;
  const caret = field.selectionStart ?? field.value.length;
  session.edit(field.value);
  const again = document.getElementById('modification') as HTMLInputElement | null;
  if (again !== null) {
    again.focus();
    again.setSelectionRange(caret, caret);
  }
});

root.addEventListener('change', (event) => {
  const target = event.target as HTMLElement;
  if (target.id !== 'upload-file') {
    return;
  }
  const file = (target as HTMLInputElement).files?.[0];
  if (file !== undefined) {
    const reference: Reference = { kind: 'upload', file, name: file.name };
    session.pick(reference);
  }
});

root.addEventListener('keydown', (event) => {
  const key = event as KeyboardEvent;
  if (key.key === 'Enter' && (key.target as HTMLElement).id === 'modification') {
    void session.search();
  }
});

paint(session.state);

client
  .health()
  .then((info) => {
    health = info;
    paint(session.state);
  })
  .catch(() => {
    health = null;
    paint(session.state);
  });
