/**
 * Pure view-model logic for the dashboard panels. Everything here is
 * side-effect free so it can be unit tested without a DOM.
 */

import type { ChatResponse, ExecutedToolCall, Reading } from "./api.js";

/** Tracks poll outcomes; the live panel is stale after 2 missed polls. */
export class PollTracker {
  private misses = 0;

  recordSuccess(): void {
    this.misses = 0;
  }

  recordFailure(): void {
    this.misses += 1;
  }

  get stale(): boolean {
    return this.misses >= 2;
  }
}

export interface LivePanelModel {
  hasData: boolean;
  deviceId: string;
  capturedAt: string;
  /** [label, rendered value] pairs, one per measurement, verbatim from the payload. */
  measurements: Array<[string, string]>;
  flags: string[];
  stale: boolean;
}

const MEASUREMENT_LABELS: Array<[string, keyof Reading]> = [
  ["Temperature (C)", "temperature"],
  ["Humidity (%)", "humidity"],
  ["CO2 (ppm)", "co2"],
  ["PM1.0 (ug/m3)", "pm1_0"],
  ["PM2.5 (ug/m3)", "pm2_5"],
  ["PM10 (ug/m3)", "pm10"],
];

/** Renders a number exactly as JSON would; no rounding, no fabrication. */
export function renderValue(value: number): string {
  return JSON.stringify(value);
}

export function buildLivePanel(latest: Reading | undefined, stale: boolean): LivePanelModel {
  if (!latest) {
    return {
      hasData: false,
      deviceId: "",
      capturedAt: "",
      measurements: [],
      flags: [],
      stale,
    };
  }
  return {
    hasData: true,
    deviceId: latest.device_id,
    capturedAt: latest.captured_at,
    measurements: MEASUREMENT_LABELS.map(([label, key]) => [
      label,
      renderValue(latest[key] as number),
    ]),
    flags: latest.flags,
    stale,
  };
}

// --- chat transcript ---------------------------------------------------------

export interface AuditChip {
  toolName: string;
  argsText: string;
  result: unknown;
  resultText: string;
  isError: boolean;
}

export type TranscriptEntry =
  | { kind: "user"; text: string }
  | { kind: "assistant"; text: string; chips: AuditChip[] }
  | { kind: "error"; text: string; loopExceeded: boolean };

export function buildAuditChip(call: ExecutedToolCall): AuditChip {
  return {
    toolName: call.tool_name,
    argsText: JSON.stringify(call.args),
    resultText: JSON.stringify(call.result),
    isError: call.is_error,
  };
}

export function appendUserEntry(transcript: TranscriptEntry[], text: string): TranscriptEntry[] {
  return [...transcript, { kind: "user", text }];
}

export function appendReplyEntry(
  transcript: TranscriptEntry[],
  response: ChatResponse,
): TranscriptEntry[] {
  return [
    ...transcript,
    {
      kind: "assistant",
      text: response.reply,
      chips: response.tool_calls.map(buildAuditChip),
    },
  ];
}

export function appendErrorEntry(
  transcript: TranscriptEntry[],
  message: string,
  status?: number,
): TranscriptEntry[] {
  return [
    ...transcript,
    { kind: "error", text: message, loopExceeded: status === 409 },
  ];
}

/** Standalone numeric tokens in a reply (for grounding checks). */
export function extractNumbers(text: string): string[] {
  return text.match(/\d+(?:\.\d+)?/g) ?? [];
}

/** True when every number in the reply appears in some audit chip's result. */
export function replyGroundedInChips(reply: string, chips: AuditChip[]): boolean {
  const haystack = chips.map((c) => c.resultText).join("\n");
  return extractNumbers(reply).every((n) => haystack.includes(n));
}
