// Debounced per-direction edit requests.
//
// Rules: a slider burst collapses to one request after DEBOUNCE_MS of quiet;
// at most one request is in flight per direction; a response that no longer
// matches the newest request token for its direction is discarded, and the
// newest request is sent instead once the line is free.

import type { EditRequest, EditResponse } from "./api";

export const DEBOUNCE_MS = 150;

export type SendFn = (req: EditRequest) => Promise<EditResponse>;

interface Line {
  timer: ReturnType<typeof setTimeout> | null;
  latest: EditRequest | null;
  token: number; // bumped on every schedule()
  inflight: boolean;
}

export interface SchedulerHooks {
  onResult: (dir: number, req: EditRequest, resp: EditResponse) => void;
  onError: (dir: number, req: EditRequest, err: unknown) => void;
}

export class EditScheduler {
  private send: SendFn;
  private hooks: SchedulerHooks;
  private delay: number;
  private lines = new Map<number, Line>();

  constructor(send: SendFn, hooks: SchedulerHooks, delay = DEBOUNCE_MS) {
    this.send = send;
    this.hooks = hooks;
    this.delay = delay;
  }

  private line(dir: number): Line {
    let l = this.lines.get(dir);
    if (!l) {
      l = { timer: null, latest: null, token: 0, inflight: false };
      this.lines.set(dir, l);
    }
    return l;
  }

  schedule(dir: number, req: EditRequest): void {
    const l = this.line(dir);
    l.latest = req;
    l.token += 1;
    if (l.timer !== null) clearTimeout(l.timer);
    l.timer = setTimeout(() => {
      l.timer = null;
      if (!l.inflight) this.launch(dir, l);
      // an in-flight completion picks the latest request up itself
    }, this.delay);
  }

  private launch(dir: number, l: Line): void {
    const req = l.latest;
    if (req === null) return;
    const myToken = l.token;
    l.inflight = true;
    this.send(req).then(
      (resp) => {
        l.inflight = false;
        if (myToken === l.token) this.hooks.onResult(dir, req, resp);
        else if (l.timer === null) this.launch(dir, l); // newer request waiting
      },
      (err) => {
        l.inflight = false;
        if (myToken === l.token) this.hooks.onError(dir, req, err);
        else if (l.timer === null) this.launch(dir, l);
      },
    );
  }

  // Drop the pending request for a direction; an in-flight response for it
  // will be discarded when it lands.
  cancel(dir: number): void {
    const l = this.lines.get(dir);
    if (!l) return;
    if (l.timer !== null) clearTimeout(l.timer);
    l.timer = null;
    l.latest = null;
    l.token += 1;
  }

  pendingCount(): number {
    let n = 0;
    for (const l of this.lines.values())
      if (l.timer !== null || l.inflight) n += 1;
    return n;
  }
}
