"""Deterministic prompt and caption templating from structured scene facts.

Replaces the external captioner with a fixed clause order and a fixed
phrase lexicon: identical facts always produce identical text, every
emitted clause traces back to an input field, and the visibility rules
(jersey numbers only when visible, team names only on the home kit,
player names only when readable) are enforced before any text is built.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Optional

from .errors import ValidationError

ROLES = ("player", "goalkeeper", "referee", "coach", "spectator")

HAIR_STYLES = ("bald", "short", "long", "braids", "ponytail", "other")

OCCUPANCY_LEVELS = ("empty", "half_full", "full", "blurred")

LANDMARKS = ("billboards", "goalposts", "corner_flag", "net", "field_markings")

OCCUPANCY_PHRASES = {
    "empty": "an empty stadium with no spectators",
    "half_full": "a half full stadium with a moderate crowd",
    "full": "a stadium at full capacity with a sold-out crowd",
    "blurred": "a blurred background",
}

LANDMARK_PHRASES = {
    "billboards": "advertising boards",
    "goalposts": "the goalposts",
    "corner_flag": "the corner flag",
    "net": "the net",
    "field_markings": "field markings",
}

HAIR_PHRASES = {
    "bald": "a bald head",
    "short": "short hair",
    "long": "long hair",
    "braids": "braids",
    "ponytail": "a ponytail",
    "other": "a distinctive hairstyle",
}

_COUNT_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")


@lru_cache(maxsize=1)
def skin_tone_vocabulary() -> tuple[str, ...]:
    """Neutral descriptor whitelist, shipped as package data."""
    text = resources.files("upres").joinpath("data/skin_tones.json").read_text()
    return tuple(json.loads(text)["descriptors"])


@dataclass
class Individual:
    role: str
    jersey_color: str
    shorts_color: str
    action: str
    team_name: Optional[str] = None
    is_home_kit: bool = False
    jersey_number: Optional[int] = None
    number_visible: bool = False
    player_name: Optional[str] = None
    name_visible: bool = False
    hair: Optional[str] = None
    skin_tone_descriptor: Optional[str] = None


@dataclass
class Background:
    occupancy: str
    landmarks: list[str] = field(default_factory=list)


@dataclass
class SceneFacts:
    individuals: list[Individual]
    background: Background
    spatial_notes: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def facts_from_dict(d: dict) -> SceneFacts:
    """Parse a facts JSON document; raises ValidationError on bad shape."""
    problems = []
    if not isinstance(d, dict):
        raise ValidationError(["facts document must be a JSON object"])
    individuals = []
    raw_individuals = d.get("individuals")
    if not isinstance(raw_individuals, list):
        problems.append("individuals: must be a list")
        raw_individuals = []
    for i, raw in enumerate(raw_individuals):
        if not isinstance(raw, dict):
            problems.append(f"individuals[{i}]: must be an object")
            continue
        known = {f for f in Individual.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            problems.append(f"individuals[{i}]: unknown fields {sorted(unknown)}")
            continue
        try:
            individuals.append(
                Individual(
                    role=str(raw.get("role", "")),
                    jersey_color=str(raw.get("jersey_color", "")),
                    shorts_color=str(raw.get("shorts_color", "")),
                    action=str(raw.get("action", "")),
                    team_name=raw.get("team_name"),
                    is_home_kit=bool(raw.get("is_home_kit", False)),
                    jersey_number=None if raw.get("jersey_number") is None else int(raw["jersey_number"]),
                    number_visible=bool(raw.get("number_visible", False)),
                    player_name=raw.get("player_name"),
                    name_visible=bool(raw.get("name_visible", False)),
                    hair=raw.get("hair"),
                    skin_tone_descriptor=raw.get("skin_tone_descriptor"),
                )
            )
        except (TypeError, ValueError) as exc:
            problems.append(f"individuals[{i}]: {exc}")
    raw_bg = d.get("background")
    if not isinstance(raw_bg, dict):
        problems.append("background: must be an object")
        background = Background(occupancy="blurred")
    else:
        background = Background(
            occupancy=str(raw_bg.get("occupancy", "")),
            landmarks=[str(v) for v in raw_bg.get("landmarks", [])],
        )
    if problems:
        raise ValidationError(problems)
    notes = d.get("spatial_notes")
    return SceneFacts(
        individuals=individuals,
        background=background,
        spatial_notes=None if notes is None else str(notes),
    )


@dataclass
class Finding:
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_dict(self) -> dict:
        return {"ok": self.ok, "findings": [{"field": f.field, "message": f.message} for f in self.findings]}


def validate_facts(facts: SceneFacts) -> ValidationReport:
    """Check the captioning rules; returns findings instead of raising."""
    findings = []

    def add(fieldname, message):
        findings.append(Finding(fieldname, message))

    if not facts.individuals:
        add("individuals", "at least one individual is required")
    for i, ind in enumerate(facts.individuals):
        prefix = f"individuals[{i}]"
        if ind.role not in ROLES:
            add(f"{prefix}.role", f"unknown role {ind.role!r}")
        if not ind.jersey_color.strip():
            add(f"{prefix}.jersey_color", "jersey color is required")
        if not ind.shorts_color.strip():
            add(f"{prefix}.shorts_color", "shorts color is required")
        if not ind.action.strip():
            add(f"{prefix}.action", "an observable action is required")
        if ind.jersey_number is not None:
            if not ind.number_visible:
                add(
                    f"{prefix}.jersey_number",
                    "jersey number given but not fully visible; numbers may only be stated when visible",
                )
            elif not 1 <= ind.jersey_number <= 99:
                add(f"{prefix}.jersey_number", f"must be in 1..99, got {ind.jersey_number}")
        if ind.player_name is not None and not ind.name_visible:
            add(
                f"{prefix}.player_name",
                "player name given but not clearly visible; names may only be stated when readable",
            )
        if ind.team_name is not None and not ind.is_home_kit:
            add(
                f"{prefix}.team_name",
                "team name may only be stated for the home kit; omit it for second or third kits",
            )
        if ind.hair is not None and ind.hair not in HAIR_STYLES:
            add(f"{prefix}.hair", f"unknown hair style {ind.hair!r}")
        if ind.skin_tone_descriptor is not None and ind.skin_tone_descriptor not in skin_tone_vocabulary():
            add(
                f"{prefix}.skin_tone_descriptor",
                f"{ind.skin_tone_descriptor!r} is not in the neutral descriptor vocabulary",
            )
    if facts.background.occupancy not in OCCUPANCY_LEVELS:
        add("background.occupancy", f"unknown occupancy {facts.background.occupancy!r}")
    for j, mark in enumerate(facts.background.landmarks):
        if mark in LANDMARK_PHRASES:
            continue
        if mark.startswith("other:") and mark[len("other:") :].strip():
            continue
        add(f"background.landmarks[{j}]", f"unknown landmark {mark!r} (use 'other:<text>')")
    return ValidationReport(findings)


def _require_valid(facts: SceneFacts) -> None:
    report = validate_facts(facts)
    if not report.ok:
        raise ValidationError([str(f) for f in report.findings])


def _count_phrase(n: int) -> str:
    return _COUNT_WORDS[n] if n < len(_COUNT_WORDS) else str(n)


def _plural(role: str, n: int) -> str:
    if n == 1:
        return role
    return role + ("es" if role.endswith("ch") else "s")


def _landmark_list(landmarks: list[str]) -> str:
    phrases = [
        LANDMARK_PHRASES.get(m, m[len("other:") :].strip() if m.startswith("other:") else m)
        for m in landmarks
    ]
    if not phrases:
        return ""
    if len(phrases) == 1:
        return phrases[0]
    return ", ".join(phrases[:-1]) + " and " + phrases[-1]


def _kit_phrase(ind: Individual, caption_style: bool) -> str:
    shorts = "matching shorts" if ind.shorts_color == ind.jersey_color else f"{ind.shorts_color} shorts"
    if caption_style:
        return f"in a {ind.jersey_color} jersey with {shorts}"
    return f"wearing a {ind.jersey_color} jersey and {shorts}"


def _appearance_phrase(ind: Individual) -> str:
    bits = []
    if ind.hair is not None:
        bits.append(HAIR_PHRASES[ind.hair])
    if ind.skin_tone_descriptor is not None:
        bits.append(f"{ind.skin_tone_descriptor} skin tone")
    return " and ".join(bits)


def _individual_sentence(ind: Individual, caption_style: bool) -> str:
    parts = [f"A {ind.role}"]
    if ind.team_name is not None and ind.is_home_kit:
        parts.append(f"from {ind.team_name}")
    appearance = _appearance_phrase(ind)
    if appearance:
        parts.append(f"with {appearance}")
    if caption_style:
        parts[-1] = parts[-1] + ","
        parts.append(_kit_phrase(ind, True) + ",")
        if ind.jersey_number is not None and ind.number_visible:
            parts.append(f"marked with the number {ind.jersey_number},")
    else:
        parts.append(_kit_phrase(ind, False))
        if ind.jersey_number is not None and ind.number_visible:
            parts.append(f"with the number {ind.jersey_number}")
    if ind.player_name is not None and ind.name_visible:
        parts.append(f"identified as {ind.player_name},")
    parts.append(f"is {ind.action.strip().rstrip('.')}.")
    return " ".join(parts)


def _background_sentence(bg: Background, caption_style: bool) -> str:
    marks = _landmark_list(bg.landmarks)
    occupancy = OCCUPANCY_PHRASES[bg.occupancy]
    if caption_style:
        if marks:
            return f"The background shows {marks}, with {occupancy}."
        return f"The background shows {occupancy}."
    if marks:
        return f"The scene unfolds on a soccer field, with {occupancy} featuring {marks}."
    return f"The scene unfolds on a soccer field, with {occupancy}."


def _notes_sentence(notes: Optional[str]) -> Optional[str]:
    if notes is None or not notes.strip():
        return None
    text = notes.strip().rstrip(".")
    return text[0].upper() + text[1:] + "."


def build_prompt(facts: SceneFacts) -> str:
    """Single-paragraph generation prompt: individuals, spatial notes, background."""
    _require_valid(facts)
    sentences = [_individual_sentence(ind, caption_style=False) for ind in facts.individuals]
    notes = _notes_sentence(facts.spatial_notes)
    if notes:
        sentences.append(notes)
    sentences.append(_background_sentence(facts.background, caption_style=False))
    return " ".join(sentences)


def build_caption(facts: SceneFacts) -> str:
    """Dataset caption: headcount first, then per-individual detail, then background."""
    _require_valid(facts)
    counts: dict[str, int] = {}
    for ind in facts.individuals:
        counts[ind.role] = counts.get(ind.role, 0) + 1
    groups = [f"{_count_phrase(n)} {_plural(role, n)}" for role, n in counts.items()]
    if len(groups) == 1:
        listing = groups[0]
    else:
        listing = ", ".join(groups[:-1]) + " and " + groups[-1]
    head = f"The image shows {listing}."
    sentences = [head]
    sentences += [_individual_sentence(ind, caption_style=True) for ind in facts.individuals]
    notes = _notes_sentence(facts.spatial_notes)
    if notes:
        sentences.append(notes)
    sentences.append(_background_sentence(facts.background, caption_style=True))
    return " ".join(sentences)


def audit_text(text: str, facts: SceneFacts) -> list[str]:
    """Substring audit: the text must not leak rule-violating tokens.

    Checks that every digit run corresponds to a visible jersey number,
    every visible number is present, team names appear only for home kits,
    hidden player names never appear, and the occupancy phrase is present.
    """
    problems = []
    allowed_numbers = {
        str(ind.jersey_number)
        for ind in facts.individuals
        if ind.jersey_number is not None and ind.number_visible
    }
    for token in re.findall(r"\d+", text):
        if token not in allowed_numbers:
            problems.append(f"number {token} appears but is not a visible jersey number")
    for number in allowed_numbers:
        if number not in text:
            problems.append(f"visible jersey number {number} missing from text")
    for ind in facts.individuals:
        if ind.team_name is None:
            continue
        if ind.is_home_kit and ind.team_name not in text:
            problems.append(f"home-kit team name {ind.team_name!r} missing from text")
        if not ind.is_home_kit and ind.team_name in text:
            problems.append(f"team name {ind.team_name!r} leaked for a non-home kit")
    for ind in facts.individuals:
        if ind.player_name and not ind.name_visible and ind.player_name in text:
            problems.append(f"hidden player name {ind.player_name!r} leaked")
    if OCCUPANCY_PHRASES[facts.background.occupancy] not in text:
        problems.append(f"occupancy phrase for {facts.background.occupancy!r} missing")
    return problems
