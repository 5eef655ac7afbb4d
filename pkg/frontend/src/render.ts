/**
 * Pure snapshot -> HTML string rendering. Re-rendering the same snapshot
 * yields the same markup, so event replay and reconnects are idempotent by
 * construction. main.ts swaps innerHTML and binds handlers by data-* hooks.
 */

import type { BranchColumn, WipeState } from "./gallery.js";
import type { Finding, GpuSample, JobRecord, JobStateName } from "./types.js";

const STATE_SEQUENCE: JobStateName[] = [
  "created",
  "preprocessed",
  "stage1_running",
  "stage1_review",
  "stage2_running",
  "stage2_review",
  "completed",
];

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}

export function renderStateChips(state: JobStateName): string {
  if (state === "failed") {
    return '<div class="chips"><span class="chip chip-failed active">failed</span></div>';
  }
  const chips = STATE_SEQUENCE.map((name) => {
    const classes = ["chip"];
    if (name === state) classes.push("active");
    if (STATE_SEQUENCE.indexOf(name) < STATE_SEQUENCE.indexOf(state)) classes.push("done");
    return `<span class="${classes.join(" ")}" data-state="${name}">${name}</span>`;
  });
  return `<div class="chips">${chips.join("")}</div>`;
}

export function renderJobSummary(job: JobRecord): string {
  return [
    `<div class="job-summary" data-job="${job.id}">`,
    `<code class="job-id">${job.id.slice(0, 12)}</code>`,
    renderStateChips(job.state),
    `<p class="prompt">${escapeHtml(job.prompt)}</p>`,
    job.error
      ? `<p class="job-error">${escapeHtml(job.error.phase)}: ${escapeHtml(job.error.message)}</p>`
      : "",
    `</div>`,
  ].join("");
}

export function renderGallery(columns: BranchColumn[], readOnly: boolean): string {
  const cols = columns.map((column) => {
    const classes = ["branch-column"];
    if (!column.enabled) classes.push("disabled");
    const tiles = column.tiles.map((tile) => {
      const tileClasses = ["tile"];
      if (tile.selected) tileClasses.push("selected");
      if (tile.isControl) tileClasses.push("control");
      const badge = tile.selected
        ? '<span class="badge">selected</span>'
        : tile.isControl
          ? '<span class="badge badge-control">control</span>'
          : "";
      const action = readOnly ? "" : ` data-select="${tile.hash}"`;
      return (
        `<figure class="${tileClasses.join(" ")}" data-hash="${tile.hash}"` +
        ` data-stage="${tile.stage}" data-branch="${tile.branch}"${action}>` +
        `<img src="${tile.imageUrl}" alt="stage ${tile.stage} ${tile.branch} #${tile.index}">` +
        `<figcaption>#${tile.index} seed ${tile.seed}${badge}</figcaption></figure>`
      );
    });
    const body =
      tiles.length > 0
        ? tiles.join("")
        : column.enabled
          ? '<p class="empty">no candidates yet</p>'
          : '<p class="empty">branch not run</p>';
    const error = column.error
      ? `<p class="branch-error">${escapeHtml(column.error)}</p>`
      : "";
    return (
      `<section class="${classes.join(" ")}" data-branch="${column.branch}">` +
      `<h3>${column.label}</h3>${error}${body}</section>`
    );
  });
  return `<div class="gallery${readOnly ? " readonly" : ""}">${cols.join("")}</div>`;
}

export function renderInlineErrors(findings: Finding[]): string {
  if (findings.length === 0) return "";
  const items = findings.map(
    (f) =>
      `<li class="finding" data-field="${escapeHtml(f.field)}">` +
      `<code>${escapeHtml(f.field)}</code> ${escapeHtml(f.message)}</li>`,
  );
  return `<ul class="findings">${items.join("")}</ul>`;
}

export function renderWipe(wipe: WipeState): string {
  const pct = (wipe.position * 100).toFixed(1);
  return (
    `<div class="wipe" data-position="${wipe.position}">` +
    `<img class="wipe-under" src="${wipe.rightUrl}" alt="after">` +
    `<div class="wipe-over" style="width:${pct}%">` +
    `<img src="${wipe.leftUrl}" alt="before"></div>` +
    `<div class="wipe-handle" style="left:${pct}%"></div></div>`
  );
}

/** Telemetry sparkline: 100x28 viewBox polyline, newest sample last. */
export function renderSparkline(samples: GpuSample[], metric: keyof GpuSample, maxValue: number): string {
  if (samples.length === 0) {
    return '<svg class="sparkline" viewBox="0 0 100 28"></svg>';
  }
  const n = samples.length;
  const points = samples
    .map((sample, i) => {
      const x = n === 1 ? 100 : (i / (n - 1)) * 100;
      const v = Math.min(1, Math.max(0, Number(sample[metric]) / maxValue));
      const y = 26 - v * 24;
      return `${x.toFixed(1)},${y.toFixed(1)}`;
    })
    .join(" ");
  return (
    `<svg class="sparkline" viewBox="0 0 100 28" data-metric="${String(metric)}">` +
    `<polyline fill="none" stroke-width="1.5" points="${points}"></polyline></svg>`
  );
}
