/** Wire types mirroring the control-service REST responses. */

export type Branch = "with_lora" | "without_lora";

export type JobStateName =
  | "created"
  | "preprocessed"
  | "stage1_running"
  | "stage1_review"
  | "stage2_running"
  | "stage2_review"
  | "completed"
  | "failed";

export interface Individual {
  role: string;
  jersey_color: string;
  shorts_color: string;
  action: string;
  team_name?: string | null;
  is_home_kit?: boolean;
  jersey_number?: number | null;
  number_visible?: boolean;
  player_name?: string | null;
  name_visible?: boolean;
  hair?: string | null;
  skin_tone_descriptor?: string | null;
}

export interface Background {
  occupancy: string;
  landmarks: string[];
}

export interface SceneFacts {
  individuals: Individual[];
  background: Background;
  spatial_notes?: string | null;
}

export interface CandidateRef {
  stage: number;
  branch: Branch;
  index: number;
  hash: string;
  seed: number;
}

export interface StateLogEntry {
  seq: number;
  from: JobStateName;
  to: JobStateName;
}

export interface Selection {
  stage: number;
  branch: Branch;
  candidate: string;
}

export interface JobRecord {
  id: string;
  source_ref: string;
  prompt: string;
  state: JobStateName;
  branches: { stage1: Branch[]; stage2: Branch[] };
  candidates: {
    stage1: Partial<Record<Branch, CandidateRef[]>>;
    stage2: Partial<Record<Branch, CandidateRef[]>>;
  };
  selection: Selection | null;
  control_ref: string | null;
  preprocessed_ref: string | null;
  state_log: StateLogEntry[];
  branch_errors: Record<string, Partial<Record<Branch, string>>>;
  error: { phase: string; message: string } | null;
  notes: string[];
  created_at: number;
  updated_at: number;
}

export interface Finding {
  field: string;
  message: string;
}

export interface BackendInfo {
  id: string;
  endpoint: string;
  declared_vram_gb: number;
  capabilities: string[];
  max_in_flight: number;
  health: "up" | "degraded" | "down";
  in_flight: number;
}

export interface GpuSample {
  timestamp: number;
  memory_used_gb: number;
  temperature_c: number;
  power_w: number;
}

export interface JobEvent {
  type: string;
  seq?: number;
  from?: JobStateName | null;
  to?: JobStateName;
  stage?: number;
  branch?: Branch;
  candidate?: string;
}

export const TERMINAL_STATES: JobStateName[] = ["completed", "failed"];
