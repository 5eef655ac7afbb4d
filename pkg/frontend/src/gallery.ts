/**
 * View-model builders for the candidate gallery: branch columns, tile
 * dedup by hash (idempotent under event replay), A/B wipe and synced
 * zoom/pan. Pure functions of the latest server snapshot.
 */

import type { Branch, CandidateRef, JobRecord } from "./types.js";

export const BRANCH_ORDER: Branch[] = ["without_lora", "with_lora"]; // left/right convention

export const BRANCH_LABELS: Record<Branch, string> = {
  without_lora: "Without LoRA",
  with_lora: "With LoRA",
};

export interface CandidateTile {
  hash: string;
  stage: number;
  branch: Branch;
  index: number;
  seed: number;
  imageUrl: string;
  selected: boolean;
  isControl: boolean;
}

export interface BranchColumn {
  branch: Branch;
  label: string;
  enabled: boolean;
  error: string | null;
  tiles: CandidateTile[];
}

/**
 * Both branch columns are always rendered, even when a branch was not run
 * (grayed out), so operators see what was skipped.
 */
export function galleryColumns(
  job: JobRecord,
  stage: 1 | 2,
  candidateUrl: (hash: string) => string,
): BranchColumn[] {
  const stageKey = `stage${stage}` as "stage1" | "stage2";
  const enabledBranches = new Set(job.branches[stageKey]);
  const byBranch = job.candidates[stageKey] ?? {};
  const errors = job.branch_errors[stageKey] ?? {};
  return BRANCH_ORDER.map((branch) => {
    const refs = dedupeByHash(byBranch[branch] ?? []);
    return {
      branch,
      label: BRANCH_LABELS[branch],
      enabled: enabledBranches.has(branch),
      error: errors[branch] ?? null,
      tiles: refs.map((ref) => toTile(job, ref, candidateUrl)),
    };
  });
}

function toTile(job: JobRecord, ref: CandidateRef, candidateUrl: (hash: string) => string): CandidateTile {
  const selected =
    job.selection !== null &&
    job.selection.stage === ref.stage &&
    job.selection.branch === ref.branch &&
    job.selection.candidate === ref.hash;
  return {
    hash: ref.hash,
    stage: ref.stage,
    branch: ref.branch,
    index: ref.index,
    seed: ref.seed,
    imageUrl: candidateUrl(ref.hash),
    selected,
    isControl: job.control_ref === ref.hash,
  };
}

export function dedupeByHash(refs: CandidateRef[]): CandidateRef[] {
  const seen = new Set<string>();
  const out: CandidateRef[] = [];
  for (const ref of refs) {
    if (!seen.has(ref.hash)) {
      seen.add(ref.hash);
      out.push(ref);
    }
  }
  return out;
}

/** Stage-2 can launch only from review with a stage-1 control picked. */
export function canRunStage2(job: JobRecord): boolean {
  return job.state === "stage1_review" && job.control_ref !== null;
}

export function isReadOnly(job: JobRecord): boolean {
  return job.state === "completed";
}

// -- A/B wipe -----------------------------------------------------------------

export interface WipeState {
  leftUrl: string;
  rightUrl: string;
  /** 0..1 split position */
  position: number;
}

export function makeWipe(leftUrl: string, rightUrl: string, position = 0.5): WipeState {
  return { leftUrl, rightUrl, position: clampPosition(position) };
}

export function moveWipe(wipe: WipeState, position: number): WipeState {
  return { ...wipe, position: clampPosition(position) };
}

function clampPosition(p: number): number {
  return Math.min(1, Math.max(0, p));
}

// -- synced zoom/pan -------------------------------------------------------------

export interface ViewerState {
  zoom: number;
  panX: number;
  panY: number;
}

export const DEFAULT_VIEWER: ViewerState = { zoom: 1, panX: 0, panY: 0 };

const MIN_ZOOM = 1;
const MAX_ZOOM = 16;

/** Zoom about a focal point (viewport fractions); pan follows the focus. */
export function zoomAt(viewer: ViewerState, factor: number, fx: number, fy: number): ViewerState {
  const zoom = Math.min(MAX_ZOOM, Math.max(MIN_ZOOM, viewer.zoom * factor));
  const applied = zoom / viewer.zoom;
  return clampPan({
    zoom,
    panX: fx - (fx - viewer.panX) * applied,
    panY: fy - (fy - viewer.panY) * applied,
  });
}

export function panBy(viewer: ViewerState, dx: number, dy: number): ViewerState {
  return clampPan({ ...viewer, panX: viewer.panX + dx, panY: viewer.panY + dy });
}

function clampPan(viewer: ViewerState): ViewerState {
  const limit = viewer.zoom - 1;
  return {
    zoom: viewer.zoom,
    panX: Math.min(0, Math.max(-limit, viewer.panX)),
    panY: Math.min(0, Math.max(-limit, viewer.panY)),
  };
}
