/**
 * Client-side mirror of the server's scene-fact rules, for instant inline
 * feedback in the intake form. The server stays authoritative: anything
 * passing here is re-validated by POST /jobs and POST /prompt/preview.
 */

import type { Finding, SceneFacts } from "./types.js";

export const ROLES = ["player", "goalkeeper", "referee", "coach", "spectator"];

export const HAIR_STYLES = ["bald", "short", "long", "braids", "ponytail", "other"];

export const OCCUPANCY_LEVELS = ["empty", "half_full", "full", "blurred"];

export const LANDMARKS = ["billboards", "goalposts", "corner_flag", "net", "field_markings"];

export function validateFacts(facts: SceneFacts): Finding[] {
  const findings: Finding[] = [];
  const add = (field: string, message: string) => findings.push({ field, message });

  if (!facts.individuals || facts.individuals.length === 0) {
    add("individuals", "at least one individual is required");
  }
  (facts.individuals ?? []).forEach((ind, i) => {
    const prefix = `individuals[${i}]`;
    if (!ROLES.includes(ind.role)) {
      add(`${prefix}.role`, `unknown role '${ind.role}'`);
    }
    if (!ind.jersey_color?.trim()) {
      add(`${prefix}.jersey_color`, "jersey color is required");
    }
    if (!ind.shorts_color?.trim()) {
      add(`${prefix}.shorts_color`, "shorts color is required");
    }
    if (!ind.action?.trim()) {
      add(`${prefix}.action`, "an observable action is required");
    }
    if (ind.jersey_number != null) {
      if (!ind.number_visible) {
        add(`${prefix}.jersey_number`, "jersey number given but not fully visible");
      } else if (ind.jersey_number < 1 || ind.jersey_number > 99) {
        add(`${prefix}.jersey_number`, `must be in 1..99, got ${ind.jersey_number}`);
      }
    }
    if (ind.player_name != null && !ind.name_visible) {
      add(`${prefix}.player_name`, "player name given but not clearly visible");
    }
    if (ind.team_name != null && !ind.is_home_kit) {
      add(`${prefix}.team_name`, "team name may only be stated for the home kit");
    }
    if (ind.hair != null && !HAIR_STYLES.includes(ind.hair)) {
      add(`${prefix}.hair`, `unknown hair style '${ind.hair}'`);
    }
  });
  if (!OCCUPANCY_LEVELS.includes(facts.background?.occupancy)) {
    add("background.occupancy", `unknown occupancy '${facts.background?.occupancy}'`);
  }
  (facts.background?.landmarks ?? []).forEach((mark, j) => {
    const isOther = mark.startsWith("other:") && mark.slice("other:".length).trim().length > 0;
    if (!LANDMARKS.includes(mark) && !isOther) {
      add(`background.landmarks[${j}]`, `unknown landmark '${mark}' (use 'other:<text>')`);
    }
  });
  return findings;
}

/** Group findings by field path for inline rendering next to form inputs. */
export function findingsByField(findings: Finding[]): Map<string, string[]> {
  const grouped = new Map<string, string[]>();
  for (const f of findings) {
    const list = grouped.get(f.field) ?? [];
    list.push(f.message);
    grouped.set(f.field, list);
  }
  return grouped;
}
