import { ApiClient } from './api.js';
import { App } from './app.js';
import { getOrCreateSessionId, SessionState } from './state.js';

const root = document.getElementById('app');
if (!root) {
  throw new Error('missing #app container');
}
const session = new SessionState(getOrCreateSessionId(window.localStorage));
void new App(root, new ApiClient(''), session).start();
