/**
 * Typed fetch client for the control service. All console state changes
 * round-trip through these calls; nothing mutates client-side truth.
 */

import type {
  BackendInfo,
  Finding,
  GpuSample,
  JobRecord,
  SceneFacts,
  Selection,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
    public findings: Finding[] = [],
  ) {
    super(message);
  }
}

export interface CreateJobInput {
  image: Blob;
  imageName?: string;
  facts: SceneFacts;
  stage1?: Record<string, unknown>;
  stage2?: Record<string, unknown>;
  branches?: { stage1?: string[]; stage2?: string[] };
}

async function throwApiError(response: Response): Promise<never> {
  let code = `http_${response.status}`;
  let message = response.statusText;
  let findings: Finding[] = [];
  try {
    const body = await response.json();
    code = body.code ?? code;
    message = body.message ?? JSON.stringify(body);
    if (Array.isArray(body.findings)) {
      // server findings are strings like "field: message"
      findings = body.findings.map((f: string) => {
        const idx = f.indexOf(": ");
        return idx > 0
          ? { field: f.slice(0, idx), message: f.slice(idx + 2) }
          : { field: "", message: f };
      });
    }
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(response.status, code, message, findings);
}

export class ControlServiceClient {
  constructor(
    public baseUrl: string,
    private fetchImpl: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      await throwApiError(response);
    }
    return (await response.json()) as T;
  }

  private postJson<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  health(): Promise<{ status: string; backend: string }> {
    return this.request("/health");
  }

  async createJob(input: CreateJobInput): Promise<JobRecord> {
    const form = new FormData();
    form.append("image", input.image, input.imageName ?? "cutout.png");
    form.append("facts", JSON.stringify(input.facts));
    if (input.stage1) form.append("stage1", JSON.stringify(input.stage1));
    if (input.stage2) form.append("stage2", JSON.stringify(input.stage2));
    if (input.branches) form.append("branches", JSON.stringify(input.branches));
    return this.request<JobRecord>("/jobs", { method: "POST", body: form });
  }

  listJobs(): Promise<JobRecord[]> {
    return this.request("/jobs");
  }

  getJob(jobId: string): Promise<JobRecord> {
    return this.request(`/jobs/${jobId}`);
  }

  preprocess(jobId: string): Promise<JobRecord> {
    return this.postJson(`/jobs/${jobId}/preprocess`, {});
  }

  runStage1(jobId: string, wait = true): Promise<JobRecord> {
    return this.postJson(`/jobs/${jobId}/stage1`, { wait });
  }

  runStage2(jobId: string, controlCandidate: string, wait = true): Promise<JobRecord> {
    return this.postJson(`/jobs/${jobId}/stage2`, {
      control_candidate: controlCandidate,
      wait,
    });
  }

  select(jobId: string, selection: Selection): Promise<JobRecord> {
    return this.postJson(`/jobs/${jobId}/select`, selection);
  }

  retry(jobId: string): Promise<JobRecord> {
    return this.postJson(`/jobs/${jobId}/retry`, {});
  }

  promptPreview(facts: SceneFacts): Promise<{ prompt: string; caption: string }> {
    return this.postJson("/prompt/preview", facts);
  }

  backends(): Promise<BackendInfo[]> {
    return this.request("/backends");
  }

  telemetry(backendId: string, limit = 60): Promise<{ backend: string; samples: GpuSample[] }> {
    return this.request(`/backends/${backendId}/telemetry?limit=${limit}`);
  }

  /** Content-addressed blob URL; usable directly as an <img> src. */
  candidateUrl(hash: string): string {
    return `${this.baseUrl}/candidates/${hash}`;
  }

  eventsUrl(jobId: string, replayOnly = false): string {
    return `${this.baseUrl}/jobs/${jobId}/events${replayOnly ? "?replay_only=true" : ""}`;
  }
}
