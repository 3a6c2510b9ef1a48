/**
 * End-to-end against the real backend: spawns `ami serve` with a scripted
 * planner, then drives the same client/view-model code the dashboard uses.
 */

import { spawn, type ChildProcess } from "node:child_process";
import { pbkdf2Sync } from "node:crypto";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { buildAuditChip, buildLivePanel, PollTracker, replyGroundedInChips } from "../src/state.js";

const REPO_ROOT = resolve(fileURLToPath(new URL(".", import.meta.url)), "..", "..");
const PORT = 18300 + Math.floor(Math.random() * 500);
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess;

function passwordHash(password: string): string {
  const salt = "ab12cd34ef56ab78";
  const digest = pbkdf2Sync(password, salt, 60000, 32, "sha256").toString("hex");
  return `pbkdf2_sha256$60000$${salt}$${digest}`;
}

async function waitForServer(): Promise<void> {
  const deadline = Date.now() + 20_000;
  while (Date.now() < deadline) {
    try {
      const response = await fetch(`${BASE}/api/openapi.json`);
      if (response.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 100));
  }
  throw new Error("backend did not come up");
}

beforeAll(async () => {
  const dir = mkdtempSync(join(tmpdir(), "ami-frontend-"));
  const rules = join(REPO_ROOT, "src", "ami", "data", "default.rules");
  const config = join(dir, "ami.toml");
  writeFileSync(
    config,
    [
      `bind_address = "127.0.0.1:${PORT}"`,
      `data_dir = "${join(dir, "data")}"`,
      'planner_mode = "scripted"',
      `scripted_rules_path = "${rules}"`,
      "",
      "[[seed_users]]",
      'username = "alice"',
      `password_hash = "${passwordHash("alice-password")}"`,
      'display_name = "Alice"',
      'email = "alice@example.com"',
    ].join("\n"),
  );
  server = spawn("python3", ["-m", "ami.cli", "serve", "--config", config], {
    cwd: REPO_ROOT,
    stdio: ["ignore", "pipe", "pipe"],
  });
  await waitForServer();
}, 30_000);

afterAll(() => {
  server?.kill("SIGTERM");
});

const READING_BODY = {
  device_id: "e2e-1",
  captured_at: "2025-01-01T08:30:00Z",
  temperature: 22.75,
  humidity: 41.5,
  co2: 617.0,
  pm1_0: 2.5,
  pm2_5: 6.25,
  pm10: 9.0,
};

describe("dashboard against a live scripted backend", () => {
  const api = new ApiClient(BASE);

  it("logs in", async () => {
    await api.login("alice", "alice-password");
    expect(api.authenticated).toBe(true);
  });

  it("live panel shows a newly ingested reading on the next poll", async () => {
    const posted = await fetch(`${BASE}/sensor_data/`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(READING_BODY),
    });
    expect(posted.status).toBe(201);

    // one poll tick
    const tracker = new PollTracker();
    const readings = await api.recentReadings(1);
    tracker.recordSuccess();
    const model = buildLivePanel(readings[0], tracker.stale);
    expect(model.hasData).toBe(true);
    expect(model.stale).toBe(false);
    expect(model.deviceId).toBe("e2e-1");
    const values = model.measurements.map(([, v]) => v);
    expect(values).toEqual(["22.75", "41.5", "617", "2.5", "6.25", "9"]);
  });

  it("weather turn renders one audit chip whose numbers ground the reply", async () => {
    const response = await api.chat("How's the weather this hour?");
    expect(response.tool_calls).toHaveLength(1);
    const chip = buildAuditChip(response.tool_calls[0]);
    expect(chip.toolName).toBe("get_recent_sensor_data");
    expect(chip.isError).toBe(false);
    expect(replyGroundedInChips(response.reply, [chip])).toBe(true);
    expect(response.reply).toContain("22.75");
  });

  it("export download equals the raw endpoint byte for byte", async () => {
    const viaClient = await api.fetchExportCsv();
    const raw = await fetch(`${BASE}/api/export.csv`, {
      headers: { Authorization: `Bearer ${(api as unknown as { token: string }).token}` },
    });
    const expected = new Uint8Array(await raw.arrayBuffer());
    expect(viaClient).toEqual(expected);
    const text = new TextDecoder().decode(viaClient);
    expect(text.startsWith("device_id,captured_at,")).toBe(true);
    expect(text).toContain("e2e-1");
  });

  it("issue reported through chat appears in the issue list", async () => {
    const chat = await api.chat("the humidity sensor looks stuck");
    expect(chat.tool_calls[0].tool_name).toBe("report_issue");
    const issues = await api.issues();
    expect(issues.length).toBeGreaterThan(0);
    expect(issues[issues.length - 1].description).toContain("looks stuck");
    expect(issues.map((t) => t.id)).toEqual([...issues.map((t) => t.id)].sort((a, b) => a - b));
  });

  it("profile updates apply to the session user with inline validation", async () => {
    const updated = await api.updateProfile({ display_name: "Alice E2E" });
    expect(updated.user_id).toBe("alice");
    expect(updated.display_name).toBe("Alice E2E");
    await expect(api.updateProfile({ email: "no-at-sign" })).rejects.toThrowError(/@/);
  });
});
