/**
 * DOM wiring for the dashboard: login gate, live readings poll, history
 * chart with CSV export, chat with tool-call audit chips, issues, profile.
 */

import {
  ApiClient,
  ApiError,
  AuthExpiredError,
  MEASUREMENT_FIELDS,
  type MeasurementField,
  type Reading,
} from "./api.js";
import { buildChartModel, SERIES_COLORS } from "./chart.js";
import {
  appendErrorEntry,
  appendReplyEntry,
  appendUserEntry,
  buildLivePanel,
  PollTracker,
  type TranscriptEntry,
} from "./state.js";

const POLL_INTERVAL_MS = 5000;

const api = new ApiClient();

let transcript: TranscriptEntry[] = [];
let pendingMessage: string | null = null;
let chatBusy = false;
let rangeReadings: Reading[] = [];
const selectedFields = new Set<MeasurementField>(["temperature", "pm2_5"]);
const poller = new PollTracker();
let pollTimer: number | undefined;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function show(id: string, visible: boolean): void {
  el(id).classList.toggle("hidden", !visible);
}

// --- login -------------------------------------------------------------------

function toLogin(message = ""): void {
  if (pollTimer !== undefined) {
    clearInterval(pollTimer);
    pollTimer = undefined;
  }
  api.setToken(null);
  el("login-error").textContent = message;
  show("login-view", true);
  show("dashboard-view", false);
}

async function onLogin(event: Event): Promise<void> {
  event.preventDefault();
  const username = el<HTMLInputElement>("login-username").value.trim();
  const password = el<HTMLInputElement>("login-password").value;
  try {
    await api.login(username, password);
  } catch (error) {
    el("login-error").textContent = error instanceof Error ? error.message : "login failed";
    return;
  }
  show("login-view", false);
  show("dashboard-view", true);
  startDashboard();
}

function guard(error: unknown, fallback: string): string {
  if (error instanceof AuthExpiredError) {
    toLogin("session expired, sign in again");
    return fallback;
  }
  return error instanceof Error ? error.message : fallback;
}

// --- live panel ----------------------------------------------------------------

async function pollLive(): Promise<void> {
  try {
    const readings = await api.recentReadings(1);
    poller.recordSuccess();
    renderLive(readings[0]);
  } catch (error) {
    if (error instanceof AuthExpiredError) {
      toLogin("session expired, sign in again");
      return;
    }
    poller.recordFailure();
    renderLive(undefined, true);
  }
}

let lastReading: Reading | undefined;

function renderLive(latest?: Reading, keepLast = false): void {
  if (!keepLast) lastReading = latest;
  const model = buildLivePanel(lastReading, poller.stale);
  el("live-stale").classList.toggle("hidden", !model.stale);
  const grid = el("live-grid");
  grid.innerHTML = "";
  if (!model.hasData) {
    grid.innerHTML = '<p class="empty">No readings yet.</p>';
    return;
  }
  for (const [label, value] of model.measurements) {
    const cell = document.createElement("div");
    cell.className = "live-cell";
    cell.innerHTML = `<span class="live-value"></span><span class="live-label"></span>`;
    (cell.querySelector(".live-value") as HTMLElement).textContent = value;
    (cell.querySelector(".live-label") as HTMLElement).textContent = label;
    grid.appendChild(cell);
  }
  el("live-meta").textContent =
    `${model.deviceId} at ${model.capturedAt}` +
    (model.flags.length ? ` [${model.flags.join(", ")}]` : "");
}

// --- history chart --------------------------------------------------------------

function currentRange(): [string, string] {
  return [
    el<HTMLInputElement>("range-start").value,
    el<HTMLInputElement>("range-end").value,
  ];
}

async function loadRange(): Promise<void> {
  const [start, end] = currentRange();
  if (!start || !end) return;
  try {
    rangeReadings = await api.rangeReadings(start, end);
    el("chart-error").textContent = "";
  } catch (error) {
    el("chart-error").textContent = guard(error, "range query failed");
    return;
  }
  renderChart();
}

function renderChart(): void {
  const model = buildChartModel(rangeReadings, selectedFields);
  const svg = el("chart-svg");
  svg.innerHTML = "";
  show("chart-empty", model.empty);
  if (model.empty) return;
  for (const series of model.series) {
    const line = document.createElementNS("http://www.w3.org/2000/svg", "polyline");
    line.setAttribute("points", series.points);
    line.setAttribute("fill", "none");
    line.setAttribute("stroke", series.color);
    line.setAttribute("stroke-width", "1.5");
    svg.appendChild(line);
  }
  if (model.yLabels) {
    el("chart-ymin").textContent = model.yLabels[0];
    el("chart-ymax").textContent = model.yLabels[1];
  }
}

function renderFieldToggles(): void {
  const box = el("field-toggles");
  box.innerHTML = "";
  for (const field of MEASUREMENT_FIELDS) {
    const label = document.createElement("label");
    label.className = "toggle";
    const input = document.createElement("input");
    input.type = "checkbox";
    input.checked = selectedFields.has(field);
    input.addEventListener("change", () => {
      // Toggling only re-renders; no refetch.
      if (input.checked) selectedFields.add(field);
      else selectedFields.delete(field);
      renderChart();
    });
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = SERIES_COLORS[field];
    label.append(input, swatch, document.createTextNode(field));
    box.appendChild(label);
  }
}

async function onExport(): Promise<void> {
  const [start, end] = currentRange();
  try {
    const bytes =
      start && end ? await api.fetchExportCsv(start, end) : await api.fetchExportCsv();
    const blob = new Blob([bytes], { type: "text/csv" });
    const url = URL.createObjectURL(blob);
    const link = document.createElement("a");
    link.href = url;
    link.download = "export.csv";
    link.click();
    URL.revokeObjectURL(url);
  } catch (error) {
    el("chart-error").textContent = guard(error, "export failed");
  }
}

// --- chat ------------------------------------------------------------------------

function renderTranscript(): void {
  const box = el("chat-transcript");
  box.innerHTML = "";
  for (const entry of transcript) {
    const bubble = document.createElement("div");
    if (entry.kind === "user") {
      bubble.className = "bubble user";
      bubble.textContent = entry.text;
    } else if (entry.kind === "assistant") {
      bubble.className = "bubble assistant";
      bubble.textContent = entry.text;
      for (const chip of entry.chips) {
        const details = document.createElement("details");
        details.className = chip.isError ? "chip chip-error" : "chip";
        const summary = document.createElement("summary");
        summary.textContent = `[tool] ${chip.toolName}`;
        const body = document.createElement("pre");
        body.textContent = `${chip.toolName}(${chip.argsText})\n-> ${chip.resultText}`;
        details.append(summary, body);
        bubble.appendChild(details);
      }
    } else {
      bubble.className = entry.loopExceeded ? "bubble error loop" : "bubble error";
      bubble.textContent = entry.text;
      if (pendingMessage !== null && entry === transcript[transcript.length - 1]) {
        const retry = document.createElement("button");
        retry.textContent = "retry";
        retry.addEventListener("click", () => void sendChat(pendingMessage as string, true));
        bubble.appendChild(retry);
      }
    }
    box.appendChild(bubble);
  }
  box.scrollTop = box.scrollHeight;
}

async function sendChat(message: string, isRetry = false): Promise<void> {
  if (chatBusy) return;
  chatBusy = true;
  if (!isRetry) {
    transcript = appendUserEntry(transcript, message);
    renderTranscript();
  }
  try {
    const response = await api.chat(message);
    pendingMessage = null;
    transcript = appendReplyEntry(transcript, response);
  } catch (error) {
    if (error instanceof AuthExpiredError) {
      toLogin("session expired, sign in again");
      chatBusy = false;
      return;
    }
    pendingMessage = message;
    const status = error instanceof ApiError ? error.status : undefined;
    const text =
      status === 409
        ? "The assistant hit its tool-call budget without finishing. Try rephrasing."
        : `Message failed: ${error instanceof Error ? error.message : "network error"}`;
    transcript = appendErrorEntry(transcript, text, status);
  }
  chatBusy = false;
  renderTranscript();
  void refreshIssues();
}

function onChatSubmit(event: Event): void {
  event.preventDefault();
  const input = el<HTMLInputElement>("chat-input");
  const message = input.value.trim();
  if (!message) return;
  input.value = "";
  void sendChat(message);
}

// --- issues & profile ---------------------------------------------------------------

async function refreshIssues(): Promise<void> {
  try {
    const issues = await api.issues();
    const list = el("issues-list");
    list.innerHTML = "";
    if (issues.length === 0) {
      list.innerHTML = '<li class="empty">No issues reported.</li>';
      return;
    }
    for (const ticket of issues) {
      const item = document.createElement("li");
      item.textContent = `#${ticket.id} [${ticket.status}] ${ticket.description}`;
      list.appendChild(item);
    }
  } catch (error) {
    guard(error, "issues unavailable");
  }
}

async function loadProfile(): Promise<void> {
  try {
    const profile = await api.profile();
    el<HTMLInputElement>("profile-name").value = profile.display_name;
    el<HTMLInputElement>("profile-email").value = profile.email;
    el<HTMLInputElement>("profile-threshold").value =
      profile.notification_threshold_pm2_5 === null
        ? ""
        : String(profile.notification_threshold_pm2_5);
    el("profile-user").textContent = profile.user_id;
  } catch (error) {
    guard(error, "profile unavailable");
  }
}

async function onProfileSubmit(event: Event): Promise<void> {
  event.preventDefault();
  const changes: Record<string, unknown> = {};
  const name = el<HTMLInputElement>("profile-name").value;
  const email = el<HTMLInputElement>("profile-email").value;
  const threshold = el<HTMLInputElement>("profile-threshold").value;
  if (name) changes["display_name"] = name;
  if (email) changes["email"] = email;
  if (threshold) changes["notification_threshold_pm2_5"] = Number(threshold);
  const status = el("profile-status");
  try {
    const profile = await api.updateProfile(changes);
    status.textContent = `Saved for ${profile.user_id}.`;
    status.className = "ok";
  } catch (error) {
    status.textContent = guard(error, "save failed");
    status.className = "err";
  }
}

// --- boot ----------------------------------------------------------------------------

function startDashboard(): void {
  renderFieldToggles();
  void pollLive();
  pollTimer = window.setInterval(() => void pollLive(), POLL_INTERVAL_MS);
  void refreshIssues();
  void loadProfile();
}

export function boot(): void {
  el("login-form").addEventListener("submit", (e) => void onLogin(e));
  el("chat-form").addEventListener("submit", onChatSubmit);
  el("range-load").addEventListener("click", () => void loadRange());
  el("export-btn").addEventListener("click", () => void onExport());
  el("profile-form").addEventListener("submit", (e) => void onProfileSubmit(e));
  toLogin();
}

if (typeof document !== "undefined" && document.getElementById("login-view")) {
  boot();
}
