"""Caption-dataset validation, bucketing, augmentation manifests and
training-config emission for the LoRA fine-tuning workflow.

Training itself never runs here; this module plans, validates and emits
the artifacts (dataset TOML, launch arguments, manifests, plans) so the
arithmetic is checkable without GPUs.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

from PIL import Image, UnidentifiedImageError

from .errors import CaptionParseError, ConfigError


@dataclass
class BucketConfig:
    enabled: bool = True
    max_reso: int = 1024
    dim_step: int = 64
    base_resolution: tuple[int, int] = (1024, 1024)

    def __post_init__(self):
        if self.dim_step < 1 or self.max_reso < self.dim_step:
            raise ConfigError(f"bad bucket geometry: max_reso={self.max_reso} dim_step={self.dim_step}")
        if self.max_reso % self.dim_step != 0:
            raise ConfigError(f"max_reso {self.max_reso} must be a multiple of dim_step {self.dim_step}")


@dataclass
class AugmentConfig:
    flip_aug: bool = True
    num_repeats: int = 5
    shuffle_caption: bool = False

    def __post_init__(self):
        if self.num_repeats < 1:
            raise ConfigError(f"num_repeats must be >= 1, got {self.num_repeats}")


# boolean launcher flags forwarded verbatim, in emission order
DEFAULT_PASSTHROUGH_FLAGS = (
    "sdpa",
    "highvram",
    "gradient_checkpointing",
    "persistent_data_loader_workers",
    "network_train_unet_only",
    "cache_latents_to_disk",
    "cache_text_encoder_outputs_to_disk",
)

DEFAULT_MODEL_PATHS = {
    "pretrained_model_name_or_path": "/models/flux1-dev.safetensors",
    "clip_l": "/models/clip_l.safetensors",
    "t5xxl": "/models/t5xxl.safetensors",
    "ae": "/models/ae.safetensors",
    "dataset_config": "/workspace/dataset.toml",
    "output_dir": "/workspace/output",
    "output_name": "football-lora",
    "logging_dir": "/workspace/",
}


@dataclass
class TrainRunConfig:
    learning_rate: float = 1e-4
    max_train_epochs: int = 10
    train_batch_size: int = 4
    gradient_accumulation_steps: int = 1
    gpu_count: int = 2
    network_dim: int = 8
    network_alpha: int = 8
    optimizer: str = "adamw8bit"
    timestep_sampling: str = "shift"
    discrete_flow_shift: float = 3.1582
    seed: int = 42
    guidance_scale: float = 1.0
    mixed_precision: str = "bf16"
    save_precision: str = "bf16"
    save_model_as: str = "safetensors"
    network_module: str = "networks.lora_flux"
    model_prediction_type: str = "raw"
    save_every_n_epochs: int = 2
    max_data_loader_n_workers: int = 2
    log_with: str = "tensorboard"
    passthrough_flags: tuple[str, ...] = DEFAULT_PASSTHROUGH_FLAGS
    model_paths: dict = field(default_factory=lambda: dict(DEFAULT_MODEL_PATHS))

    def validate(self) -> None:
        numeric = {
            "learning_rate": self.learning_rate,
            "max_train_epochs": self.max_train_epochs,
            "train_batch_size": self.train_batch_size,
            "gradient_accumulation_steps": self.gradient_accumulation_steps,
            "gpu_count": self.gpu_count,
            "network_dim": self.network_dim,
            "network_alpha": self.network_alpha,
            "discrete_flow_shift": self.discrete_flow_shift,
            "guidance_scale": self.guidance_scale,
            "save_every_n_epochs": self.save_every_n_epochs,
        }
        for name, value in numeric.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        # raises ConfigError when alpha exceeds dim
        effective_lora_strength(self.network_alpha, self.network_dim)


@dataclass
class CaptionFinding:
    path: str
    message: str

    def to_dict(self) -> dict:
        return {"path": self.path, "message": self.message}


@dataclass
class CaptionReport:
    total: int
    valid: list[str]
    findings: list[CaptionFinding]

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "valid": len(self.valid),
            "ok": self.ok,
            "findings": [f.to_dict() for f in self.findings],
        }


@dataclass
class CaptionDataset:
    root_dir: Path
    entries: dict[str, str]  # resolved image path -> caption text


def _resolve(path_text: str, root_dir: Path) -> Path:
    p = Path(path_text)
    return p if p.is_absolute() else root_dir / p


def validate_captions(data: bytes | str, root_dir: Path | str, check_decode: bool = True) -> CaptionReport:
    """Check a caption JSON document (one object: image path -> {"caption": text}).

    Malformed JSON raises CaptionParseError with the position; everything
    else lands in the report as per-entry findings.
    """
    root = Path(root_dir)
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaptionParseError(f"malformed caption JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    findings: list[CaptionFinding] = []
    valid: list[str] = []
    if not isinstance(doc, dict):
        return CaptionReport(total=0, valid=[], findings=[CaptionFinding("$", "top level must be a JSON object")])
    for path_text, value in doc.items():
        if not isinstance(value, dict) or not isinstance(value.get("caption"), str):
            findings.append(CaptionFinding(path_text, 'entry must be an object with a string "caption"'))
            continue
        if not value["caption"].strip():
            findings.append(CaptionFinding(path_text, "caption is empty"))
            continue
        resolved = _resolve(path_text, root)
        if not resolved.is_file():
            findings.append(CaptionFinding(path_text, f"image file not found: {resolved}"))
            continue
        if check_decode:
            try:
                with Image.open(resolved) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError, SyntaxError) as exc:
                findings.append(CaptionFinding(path_text, f"image does not decode: {exc}"))
                continue
        valid.append(path_text)
    return CaptionReport(total=len(doc), valid=valid, findings=findings)


def load_caption_dataset(data: bytes | str, root_dir: Path | str) -> CaptionDataset:
    report = validate_captions(data, root_dir)
    if not report.ok:
        raise ConfigError(
            "caption dataset invalid: " + "; ".join(f"{f.path}: {f.message}" for f in report.findings)
        )
    doc = json.loads(data.decode("utf-8") if isinstance(data, bytes) else data)
    entries = {path: doc[path]["caption"] for path in sorted(report.valid)}
    return CaptionDataset(root_dir=Path(root_dir), entries=entries)


def enumerate_buckets(cfg: BucketConfig) -> list[tuple[int, int]]:
    """All (bw, bh) with both multiples of dim_step and bw*bh <= max_reso^2."""
    step = cfg.dim_step
    max_area = cfg.max_reso * cfg.max_reso
    buckets = []
    bw = step
    while bw * step <= max_area:
        bh = step
        while bw * bh <= max_area:
            buckets.append((bw, bh))
            bh += step
        bw += step
    return buckets


def assign_buckets(dims: Sequence[tuple[int, int]], cfg: BucketConfig) -> list[tuple[int, int]]:
    """Map each (w, h) to the enumerated bucket minimizing log-aspect distance.

    Ties prefer the largest area (use the full pixel budget), then the
    smaller width, so assignment is deterministic.
    """
    if not cfg.enabled:
        return [tuple(cfg.base_resolution) for _ in dims]
    buckets = enumerate_buckets(cfg)
    out = []
    for w, h in dims:
        if w < 1 or h < 1:
            raise ValueError(f"image dimensions must be positive, got {w}x{h}")
        target = math.log(w / h)
        best = min(buckets, key=lambda b: (abs(math.log(b[0] / b[1]) - target), -b[0] * b[1], b[0]))
        out.append(best)
    return out


@dataclass
class ManifestRow:
    path: str
    flip: bool

    def to_dict(self) -> dict:
        return {"path": self.path, "flip": self.flip}


def expand_manifest(dataset: CaptionDataset, aug: AugmentConfig, seed: int) -> list[ManifestRow]:
    """One epoch worth of rows: |entries| x num_repeats, seeded flips and order.

    The flip decision is per manifest row, so a repeated image may appear
    both flipped and unflipped within the same epoch.
    """
    rng = random.Random(seed)
    rows = [
        ManifestRow(path, aug.flip_aug and rng.random() < 0.5)
        for path in dataset.entries
        for _ in range(aug.num_repeats)
    ]
    rng.shuffle(rows)
    return rows


def effective_lora_strength(alpha: int, dim: int) -> Fraction:
    """alpha / dim as an exact fraction; the factor applied to LoRA updates."""
    if dim < 1 or alpha < 1:
        raise ValueError(f"alpha and dim must be >= 1, got alpha={alpha} dim={dim}")
    if alpha > dim:
        raise ConfigError(
            f"network_alpha {alpha} exceeds network_dim {dim}: effective strength above 1 "
            "leads to unintended LoRA behavior and unstable training"
        )
    return Fraction(alpha, dim)


@dataclass
class TrainingPlan:
    samples_per_epoch: int
    steps_per_epoch: int
    total_steps: int

    def to_dict(self) -> dict:
        return {
            "samples_per_epoch": self.samples_per_epoch,
            "steps_per_epoch": self.steps_per_epoch,
            "total_steps": self.total_steps,
        }


def training_plan(
    n_images: int,
    aug: AugmentConfig,
    batch_size: int,
    gpu_count: int,
    grad_accum: int,
    epochs: int,
) -> TrainingPlan:
    if min(n_images, batch_size, gpu_count, grad_accum, epochs) < 1:
        raise ValueError("all plan inputs must be >= 1")
    samples = n_images * aug.num_repeats
    steps = math.ceil(samples / (batch_size * gpu_count * grad_accum))
    return TrainingPlan(samples_per_epoch=samples, steps_per_epoch=steps, total_steps=steps * epochs)


def _toml_str(value: str) -> str:
    return "'" + value.replace("'", "''") + "'"


def _toml_bool(value: bool) -> str:
    return "true" if value else "false"


def emit_dataset_toml(
    bucket: BucketConfig,
    aug: AugmentConfig,
    image_dir: str,
    metadata_file: str,
) -> str:
    """Dataset TOML in the training tool's layout; byte-stable for goldens."""
    lines = [
        "[[datasets]]",
        f"resolution = [{bucket.base_resolution[0]}, {bucket.base_resolution[1]}]",
        f"enable_bucket = {_toml_bool(bucket.enabled)}",
        f"max_bucket_reso = {bucket.max_reso}",
        "",
        "  [[datasets.subsets]]",
        f"  image_dir = {_toml_str(image_dir)}",
        f"  metadata_file = {_toml_str(metadata_file)}",
        f"  flip_aug = {_toml_bool(aug.flip_aug)}",
        f"  num_repeats = {aug.num_repeats}",
        f"  shuffle_caption = {_toml_bool(aug.shuffle_caption)}",
        "",
    ]
    return "\n".join(lines)


def _fmt_float(value: float) -> str:
    if abs(value) >= 0.01:
        return repr(float(value))
    mantissa, exponent = f"{value:e}".split("e")
    mantissa = mantissa.rstrip("0").rstrip(".")
    return f"{mantissa}e{int(exponent)}"


def emit_train_command(cfg: TrainRunConfig) -> list[str]:
    """Launch argument list for the LoRA training script (validated first)."""
    cfg.validate()
    paths = cfg.model_paths
    flags = set(cfg.passthrough_flags)
    args = ["accelerate", "launch", "flux_train_network.py"]

    def opt(name: str, value) -> None:
        args.append(f"--{name}")
        args.append(value if isinstance(value, str) else _fmt_float(value) if isinstance(value, float) else str(value))

    def passthrough(name: str) -> None:
        if name in flags:
            args.append(f"--{name}")

    for key in ("pretrained_model_name_or_path", "clip_l", "t5xxl", "ae", "dataset_config", "output_dir", "output_name"):
        opt(key, str(paths[key]))
    opt("save_model_as", cfg.save_model_as)
    passthrough("sdpa")
    passthrough("highvram")
    passthrough("gradient_checkpointing")
    passthrough("persistent_data_loader_workers")
    opt("max_data_loader_n_workers", cfg.max_data_loader_n_workers)
    opt("mixed_precision", cfg.mixed_precision)
    opt("save_precision", cfg.save_precision)
    opt("learning_rate", cfg.learning_rate)
    opt("max_train_epochs", cfg.max_train_epochs)
    opt("train_batch_size", cfg.train_batch_size)
    opt("gradient_accumulation_steps", cfg.gradient_accumulation_steps)
    passthrough("network_train_unet_only")
    opt("network_dim", cfg.network_dim)
    opt("network_alpha", cfg.network_alpha)
    opt("network_module", cfg.network_module)
    passthrough("cache_latents_to_disk")
    passthrough("cache_text_encoder_outputs_to_disk")
    opt("optimizer_type", cfg.optimizer)
    opt("timestep_sampling", cfg.timestep_sampling)
    opt("discrete_flow_shift", cfg.discrete_flow_shift)
    opt("save_every_n_epochs", cfg.save_every_n_epochs)
    opt("model_prediction_type", cfg.model_prediction_type)
    opt("seed", cfg.seed)
    opt("guidance_scale", cfg.guidance_scale)
    opt("log_with", cfg.log_with)
    opt("logging_dir", str(paths["logging_dir"]))
    return args


def render_train_command(cfg: TrainRunConfig) -> str:
    return " ".join(emit_train_command(cfg)) + "\n"


@dataclass
class LossSummary:
    initial: float
    plateau_mean: float
    plateau_std: float
    diverged: bool
    steps: list[int]
    losses: list[float]

    def to_dict(self) -> dict:
        return {
            "initial": self.initial,
            "plateau_mean": self.plateau_mean,
            "plateau_std": self.plateau_std,
            "diverged": self.diverged,
            "n_records": len(self.steps),
        }


def parse_loss_log(records: Iterable[tuple[float, float]]) -> LossSummary:
    """Summarize a (step, loss) series.

    The plateau covers the final 50% of records; std is the population
    standard deviation. The series is flagged as diverged when the plateau
    mean exceeds the initial loss.
    """
    pairs = [(float(s), float(v)) for s, v in records]
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 loss records, got {len(pairs)}")
    pairs.sort(key=lambda p: p[0])
    steps = [int(p[0]) for p in pairs]
    losses = [p[1] for p in pairs]
    plateau = losses[len(losses) // 2 :]
    mean = sum(plateau) / len(plateau)
    std = math.sqrt(sum((v - mean) ** 2 for v in plateau) / len(plateau))
    return LossSummary(
        initial=losses[0],
        plateau_mean=mean,
        plateau_std=std,
        diverged=mean > losses[0],
        steps=steps,
        losses=losses,
    )


def parse_loss_text(text: str) -> list[tuple[float, float]]:
    """Parse 'step,loss' or 'step loss' lines; blank lines and # comments skipped."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'step,loss', got {line!r}")
        out.append((float(parts[0]), float(parts[1])))
    return out
