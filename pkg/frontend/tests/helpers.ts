import type { Branch, CandidateRef, JobRecord } from "../src/types.js";

export function candidate(stage: number, branch: Branch, index: number, hash: string): CandidateRef {
  return { stage, branch, index, hash, seed: 5 };
}

export function fakeJob(overrides: Partial<JobRecord> = {}): JobRecord {
  return {
    id: "job-0001",
    source_ref: "src-hash",
    prompt: "A player wearing a red jersey and white shorts is kicking the ball.",
    state: "stage1_review",
    branches: { stage1: ["with_lora", "without_lora"], stage2: ["with_lora", "without_lora"] },
    candidates: {
      stage1: {
        with_lora: [
          candidate(1, "with_lora", 0, "a0"),
          candidate(1, "with_lora", 1, "a1"),
          candidate(1, "with_lora", 2, "a2"),
        ],
        without_lora: [
          candidate(1, "without_lora", 0, "b0"),
          candidate(1, "without_lora", 1, "b1"),
          candidate(1, "without_lora", 2, "b2"),
        ],
      },
      stage2: {},
    },
    selection: null,
    control_ref: null,
    preprocessed_ref: "pre-hash",
    state_log: [
      { seq: 0, from: "created", to: "preprocessed" },
      { seq: 1, from: "preprocessed", to: "stage1_running" },
      { seq: 2, from: "stage1_running", to: "stage1_review" },
    ],
    branch_errors: {},
    error: null,
    notes: [],
    created_at: 1000,
    updated_at: 1001,
    ...overrides,
  };
}

export const url = (hash: string) => `/candidates/${hash}`;
