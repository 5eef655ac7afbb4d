/**
 * Browser bootstrap: wires the intake form, gallery and progress panes to
 * the pure renderers. Everything it displays comes from server snapshots;
 * every change goes through the API client (no optimistic selection).
 */

import { ApiError, ControlServiceClient } from "./api.js";
import { connectJobEvents } from "./events.js";
import { canRunStage2, galleryColumns, isReadOnly } from "./gallery.js";
import {
  renderGallery,
  renderInlineErrors,
  renderJobSummary,
  renderSparkline,
} from "./render.js";
import type { JobRecord, SceneFacts } from "./types.js";
import { validateFacts } from "./validation.js";

const client = new ControlServiceClient(
  (window as unknown as { UPRES_BASE_URL?: string }).UPRES_BASE_URL ?? "",
);

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

let currentJob: JobRecord | null = null;

function readFactsForm(): SceneFacts {
  const factsText = el<HTMLTextAreaElement>("facts-json").value;
  return JSON.parse(factsText) as SceneFacts;
}

async function refreshPreview(): Promise<void> {
  const errorsBox = el<HTMLDivElement>("intake-errors");
  let facts: SceneFacts;
  try {
    facts = readFactsForm();
  } catch {
    errorsBox.innerHTML = renderInlineErrors([{ field: "facts", message: "facts must be valid JSON" }]);
    return;
  }
  const findings = validateFacts(facts);
  errorsBox.innerHTML = renderInlineErrors(findings);
  el<HTMLButtonElement>("submit-job").disabled = findings.length > 0;
  if (findings.length === 0) {
    try {
      const preview = await client.promptPreview(facts);
      el<HTMLParagraphElement>("prompt-preview").textContent = preview.prompt;
    } catch (err) {
      if (err instanceof ApiError) {
        errorsBox.innerHTML = renderInlineErrors(err.findings);
      }
    }
  }
}

function repaint(job: JobRecord): void {
  currentJob = job;
  el<HTMLDivElement>("job-pane").innerHTML = renderJobSummary(job);
  const stage: 1 | 2 = job.state.startsWith("stage2") || job.state === "completed" ? 2 : 1;
  const columns = galleryColumns(job, stage, (hash) => client.candidateUrl(hash));
  el<HTMLDivElement>("gallery-pane").innerHTML = renderGallery(columns, isReadOnly(job));
  el<HTMLButtonElement>("run-stage2").disabled = !canRunStage2(job);
  for (const tile of document.querySelectorAll<HTMLElement>("[data-select]")) {
    tile.addEventListener("click", () => {
      void selectTile(
        Number(tile.dataset.stage) as 1 | 2,
        tile.dataset.branch as "with_lora" | "without_lora",
        tile.dataset.select as string,
      );
    });
  }
}

async function selectTile(stage: 1 | 2, branch: "with_lora" | "without_lora", hash: string): Promise<void> {
  if (!currentJob) return;
  const job = await client.select(currentJob.id, { stage, branch, candidate: hash });
  repaint(job); // server ack only; no optimistic UI
}

async function followJob(jobId: string): Promise<void> {
  connectJobEvents(client.baseUrl, jobId, {
    onState: () => {
      void client.getJob(jobId).then(repaint);
    },
    onFallback: (reason) => {
      console.warn(`event stream dropped (${reason}); polling instead`);
    },
  });
  const backends = await client.backends();
  if (backends.length > 0) {
    const refresh = async () => {
      const doc = await client.telemetry(backends[0].id);
      el<HTMLDivElement>("telemetry-pane").innerHTML =
        renderSparkline(doc.samples, "memory_used_gb", backends[0].declared_vram_gb) +
        renderSparkline(doc.samples, "temperature_c", 100) +
        renderSparkline(doc.samples, "power_w", 400);
    };
    window.setInterval(() => void refresh(), 2000);
  }
}

async function submitJob(): Promise<void> {
  const fileInput = el<HTMLInputElement>("cutout-file");
  const file = fileInput.files?.[0];
  const errorsBox = el<HTMLDivElement>("intake-errors");
  if (!file) {
    errorsBox.innerHTML = renderInlineErrors([{ field: "image", message: "select a cutout image" }]);
    return;
  }
  try {
    const job = await client.createJob({ image: file, facts: readFactsForm() });
    repaint(job);
    await followJob(job.id);
    const preprocessed = await client.preprocess(job.id);
    repaint(preprocessed);
    repaint(await client.runStage1(job.id));
  } catch (err) {
    if (err instanceof ApiError) {
      errorsBox.innerHTML = renderInlineErrors(
        err.findings.length > 0 ? err.findings : [{ field: "request", message: err.message }],
      );
    }
  }
}

export function bootstrap(): void {
  el<HTMLTextAreaElement>("facts-json").addEventListener("input", () => void refreshPreview());
  el<HTMLButtonElement>("submit-job").addEventListener("click", () => void submitJob());
  el<HTMLButtonElement>("run-stage2").addEventListener("click", () => {
    if (currentJob?.control_ref) {
      void client.runStage2(currentJob.id, currentJob.control_ref).then(repaint);
    }
  });
}

if (typeof document !== "undefined" && document.readyState !== "loading") {
  bootstrap();
} else if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", bootstrap);
}
