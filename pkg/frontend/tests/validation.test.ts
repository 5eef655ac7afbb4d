import { describe, expect, it } from "vitest";

import type { SceneFacts } from "../src/types.js";
import { findingsByField, validateFacts } from "../src/validation.js";

function validFacts(): SceneFacts {
  return {
    individuals: [
      {
        role: "goalkeeper",
        jersey_color: "green",
        shorts_color: "green",
        action: "diving low to make a save",
        jersey_number: 99,
        number_visible: true,
      },
    ],
    background: { occupancy: "blurred", landmarks: ["field_markings", "other:the goal area"] },
  };
}

describe("validateFacts (client mirror)", () => {
  it("accepts valid facts", () => {
    expect(validateFacts(validFacts())).toEqual([]);
  });

  it("rejects a hidden jersey number", () => {
    const facts = validFacts();
    facts.individuals[0].number_visible = false;
    const findings = validateFacts(facts);
    expect(findings).toHaveLength(1);
    expect(findings[0].field).toBe("individuals[0].jersey_number");
  });

  it("rejects an out-of-range number", () => {
    const facts = validFacts();
    facts.individuals[0].jersey_number = 120;
    expect(validateFacts(facts)[0].message).toContain("1..99");
  });

  it("rejects a team name on an away kit", () => {
    const facts = validFacts();
    facts.individuals[0].team_name = "Inter Milan";
    facts.individuals[0].is_home_kit = false;
    expect(validateFacts(facts)[0].field).toContain("team_name");
  });

  it("rejects a hidden player name", () => {
    const facts = validFacts();
    facts.individuals[0].player_name = "Rossi";
    facts.individuals[0].name_visible = false;
    expect(validateFacts(facts)[0].field).toContain("player_name");
  });

  it("requires at least one individual", () => {
    const facts = validFacts();
    facts.individuals = [];
    expect(validateFacts(facts)[0].field).toBe("individuals");
  });

  it("requires a known occupancy and landmarks", () => {
    const facts = validFacts();
    facts.background.occupancy = "packed";
    facts.background.landmarks = ["scoreboard"];
    const fields = validateFacts(facts).map((f) => f.field);
    expect(fields).toContain("background.occupancy");
    expect(fields).toContain("background.landmarks[0]");
  });

  it("requires an action per individual", () => {
    const facts = validFacts();
    facts.individuals[0].action = "  ";
    expect(validateFacts(facts)[0].field).toContain("action");
  });

  it("groups findings by field for inline rendering", () => {
    const facts = validFacts();
    facts.individuals[0].action = "";
    facts.individuals[0].jersey_color = "";
    const grouped = findingsByField(validateFacts(facts));
    expect(grouped.get("individuals[0].action")).toHaveLength(1);
    expect(grouped.get("individuals[0].jersey_color")).toHaveLength(1);
  });
});
