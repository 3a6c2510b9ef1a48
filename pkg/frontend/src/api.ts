/**
 * Typed client for the AMI backend REST API. Every value the dashboard
 * renders comes from these responses; nothing is fabricated client-side.
 */

export interface Reading {
  device_id: string;
  captured_at: string;
  temperature: number;
  humidity: number;
  co2: number;
  pm1_0: number;
  pm2_5: number;
  pm10: number;
  flags: string[];
}

export const MEASUREMENT_FIELDS = [
  "temperature",
  "humidity",
  "co2",
  "pm1_0",
  "pm2_5",
  "pm10",
] as const;

export type MeasurementField = (typeof MEASUREMENT_FIELDS)[number];

export interface ExecutedToolCall {
  id: string;
  tool_name: string;
  args: Record<string, unknown>;
  result: unknown;
  is_error: boolean;
}

export interface ChatResponse {
  reply: string;
  tool_calls: ExecutedToolCall[];
}

export interface IssueTicket {
  id: number;
  reporter_user_id: string;
  description: string;
  status: string;
  created_at: string;
}

export interface Profile {
  user_id: string;
  display_name: string;
  email: string;
  notification_threshold_pm2_5: number | null;
}

export interface AggregateStats {
  field: string;
  count: number;
  min?: number;
  max?: number;
  mean?: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export class AuthExpiredError extends ApiError {
  constructor() {
    super(401, "session expired");
  }
}

type FetchLike = typeof fetch;

export class ApiClient {
  private token: string | null = null;

  constructor(
    private baseUrl: string = "",
    private fetchImpl: FetchLike = fetch,
  ) {}

  get authenticated(): boolean {
    return this.token !== null;
  }

  setToken(token: string | null): void {
    this.token = token;
  }

  async login(username: string, password: string): Promise<string> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/login`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ username, password }),
    });
    const body = await response.json();
    if (!response.ok) {
      throw new ApiError(response.status, body.error ?? "login failed");
    }
    this.token = body.token;
    return body.token;
  }

  private headers(extra?: Record<string, string>): Record<string, string> {
    const base: Record<string, string> = { ...extra };
    if (this.token) {
      base["Authorization"] = `Bearer ${this.token}`;
    }
    return base;
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (response.status === 401) {
      this.token = null;
      throw new AuthExpiredError();
    }
    return response;
  }

  private async requestJson<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.request(path, init);
    const body = await response.json();
    if (!response.ok) {
      throw new ApiError(response.status, describeError(body));
    }
    return body as T;
  }

  async recentReadings(limit: number): Promise<Reading[]> {
    const body = await this.requestJson<{ readings: Reading[] }>(
      `/api/readings/recent?limit=${limit}`,
      { headers: this.headers() },
    );
    return body.readings;
  }

  async rangeReadings(start: string, end: string): Promise<Reading[]> {
    const query = `start=${encodeURIComponent(start)}&end=${encodeURIComponent(end)}`;
    const body = await this.requestJson<{ readings: Reading[] }>(
      `/api/readings/range?${query}`,
      { headers: this.headers() },
    );
    return body.readings;
  }

  async aggregate(start: string, end: string, field: MeasurementField): Promise<AggregateStats> {
    const query =
      `start=${encodeURIComponent(start)}&end=${encodeURIComponent(end)}` +
      `&field=${encodeURIComponent(field)}`;
    return this.requestJson<AggregateStats>(`/api/readings/aggregate?${query}`, {
      headers: this.headers(),
    });
  }

  exportCsvPath(start?: string, end?: string): string {
    if (start === undefined || end === undefined) {
      return "/api/export.csv";
    }
    return `/api/export.csv?start=${encodeURIComponent(start)}&end=${encodeURIComponent(end)}`;
  }

  /** Raw CSV bytes, exactly as the server streams them. */
  async fetchExportCsv(start?: string, end?: string): Promise<Uint8Array<ArrayBuffer>> {
    const response = await this.request(this.exportCsvPath(start, end), {
      headers: this.headers(),
    });
    if (!response.ok) {
      throw new ApiError(response.status, "export failed");
    }
    return new Uint8Array(await response.arrayBuffer());
  }

  async chat(message: string): Promise<ChatResponse> {
    return this.requestJson<ChatResponse>("/api/chat", {
      method: "POST",
      headers: this.headers({ "Content-Type": "application/json" }),
      body: JSON.stringify({ message }),
    });
  }

  async issues(): Promise<IssueTicket[]> {
    const body = await this.requestJson<{ issues: IssueTicket[] }>("/api/issues", {
      headers: this.headers(),
    });
    return body.issues;
  }

  async profile(): Promise<Profile> {
    return this.requestJson<Profile>("/api/profile", { headers: this.headers() });
  }

  async updateProfile(changes: Partial<Omit<Profile, "user_id">>): Promise<Profile> {
    return this.requestJson<Profile>("/api/profile", {
      method: "PUT",
      headers: this.headers({ "Content-Type": "application/json" }),
      body: JSON.stringify(changes),
    });
  }
}

function describeError(body: unknown): string {
  if (body && typeof body === "object") {
    const record = body as Record<string, unknown>;
    if (typeof record.error === "string") {
      return record.error;
    }
    if (typeof record.message === "string") {
      return record.message;
    }
    if (Array.isArray(record.errors)) {
      return record.errors
        .map((e) => {
          const entry = e as { field?: string; message?: string };
          return `${entry.field ?? "?"}: ${entry.message ?? "invalid"}`;
        })
        .join("; ");
    }
  }
  return "request failed";
}
