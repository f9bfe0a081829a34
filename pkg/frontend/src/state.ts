// Session state: plain serializable data plus the few rules the UI relies on.

import type { EditRequest } from "./api";

export const ALPHA_MIN = -8;
export const ALPHA_MAX = 8;
export const HISTORY_LIMIT = 12;
export const DEFAULT_DIRECTIONS = 6;

export interface HistoryEntry {
  request: EditRequest;
  png_base64: string;
}

export interface SessionState {
  seed1: number;
  seed2: number;
  dirSeeds: number[];
  alphas: number[]; // one per direction, clamped to [ALPHA_MIN, ALPHA_MAX]
  active: number; // index into dirSeeds
  history: HistoryEntry[]; // newest first, at most HISTORY_LIMIT
}

export function clampAlpha(a: number): number {
  if (Number.isNaN(a)) return 0;
  return Math.min(ALPHA_MAX, Math.max(ALPHA_MIN, a));
}

export function newSession(
  seed1: number,
  seed2: number,
  dirSeeds: number[],
): SessionState {
  return {
    seed1,
    seed2,
    dirSeeds: [...dirSeeds],
    alphas: dirSeeds.map(() => 0),
    active: 0,
    history: [],
  };
}

export function setAlpha(s: SessionState, dir: number, alpha: number): void {
  if (dir < 0 || dir >= s.dirSeeds.length) throw new Error(`bad direction ${dir}`);
  s.alphas[dir] = clampAlpha(alpha);
  s.active = dir;
}

export function reseedW2(s: SessionState, seed2: number): void {
  s.seed2 = seed2;
}

// The request the active slider position stands for.
export function activeRequest(s: SessionState): EditRequest {
  const dirSeed = s.dirSeeds[s.active];
  const alpha = s.alphas[s.active];
  if (dirSeed === undefined || alpha === undefined)
    throw new Error(`no direction ${s.active}`);
  return { seed1: s.seed1, seed2: s.seed2, dir_seed: dirSeed, alpha };
}

export function requestFor(s: SessionState, dir: number): EditRequest {
  const dirSeed = s.dirSeeds[dir];
  const alpha = s.alphas[dir];
  if (dirSeed === undefined || alpha === undefined)
    throw new Error(`no direction ${dir}`);
  return { seed1: s.seed1, seed2: s.seed2, dir_seed: dirSeed, alpha };
}

export function pushHistory(s: SessionState, entry: HistoryEntry): void {
  s.history.unshift({
    request: { ...entry.request },
    png_base64: entry.png_base64,
  });
  if (s.history.length > HISTORY_LIMIT) s.history.length = HISTORY_LIMIT;
}

// Restoring a thumbnail brings back the full request state it was made with.
export function restoreEntry(s: SessionState, entry: HistoryEntry): void {
  const dir = s.dirSeeds.indexOf(entry.request.dir_seed);
  if (dir < 0) throw new Error(`direction ${entry.request.dir_seed} not in session`);
  s.seed2 = entry.request.seed2;
  s.alphas[dir] = clampAlpha(entry.request.alpha);
  s.active = dir;
}

// Export payload: everything needed to reproduce the image elsewhere.
export function exportPayload(s: SessionState): EditRequest {
  return activeRequest(s);
}

export function serializeSession(s: SessionState): string {
  return JSON.stringify(s);
}

export function deserializeSession(text: string): SessionState {
  const raw = JSON.parse(text) as SessionState;
  if (
    typeof raw.seed1 !== "number" ||
    typeof raw.seed2 !== "number" ||
    !Array.isArray(raw.dirSeeds) ||
    !Array.isArray(raw.alphas) ||
    raw.alphas.length !== raw.dirSeeds.length
  )
    throw new Error("malformed session");
  const s = newSession(raw.seed1, raw.seed2, raw.dirSeeds);
  raw.alphas.forEach((a, i) => setAlpha(s, i, a));
  s.active = Math.min(Math.max(0, raw.active | 0), s.dirSeeds.length - 1);
  s.history = [];
  for (const e of (raw.history ?? []).slice(0, HISTORY_LIMIT)) {
    s.history.push({ request: { ...e.request }, png_base64: e.png_base64 });
  }
  return s;
}
