import json
import math
import statistics
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upres.dataset import (
    AugmentConfig,
    BucketConfig,
    CaptionDataset,
    TrainRunConfig,
    assign_buckets,
    effective_lora_strength,
    emit_dataset_toml,
    emit_train_command,
    enumerate_buckets,
    expand_manifest,
    load_caption_dataset,
    parse_loss_log,
    parse_loss_text,
    render_train_command,
    training_plan,
    validate_captions,
)
from upres.errors import CaptionParseError, ConfigError
from upres.imaging import ImageBuffer, save_png

GOLDEN = Path(__file__).parent / "golden"


def write_images(tmp_path: Path, names: list[str]) -> None:
    data = save_png(ImageBuffer.full(8, 8, 0.5))
    for name in names:
        (tmp_path / name).write_bytes(data)


def captions_doc(tmp_path: Path, names: list[str]) -> str:
    write_images(tmp_path, names)
    return json.dumps({name: {"caption": f"A player, photo {name}."} for name in names})


class TestValidateCaptions:
    def test_two_entries_valid(self, tmp_path):
        doc = captions_doc(tmp_path, ["a.png", "b.png"])
        report = validate_captions(doc, tmp_path)
        assert report.ok
        assert report.total == 2 and len(report.valid) == 2

    def test_missing_caption_key(self, tmp_path):
        write_images(tmp_path, ["a.png"])
        doc = json.dumps({"a.png": {"text": "no caption key"}})
        report = validate_captions(doc, tmp_path)
        assert not report.ok
        assert report.findings[0].path == "a.png"

    def test_empty_caption(self, tmp_path):
        write_images(tmp_path, ["a.png"])
        report = validate_captions(json.dumps({"a.png": {"caption": "  "}}), tmp_path)
        assert [f.message for f in report.findings] == ["caption is empty"]

    def test_missing_file(self, tmp_path):
        report = validate_captions(json.dumps({"ghost.png": {"caption": "x"}}), tmp_path)
        assert "not found" in report.findings[0].message

    def test_undecodable_file(self, tmp_path):
        (tmp_path / "junk.png").write_bytes(b"this is not a png")
        report = validate_captions(json.dumps({"junk.png": {"caption": "x"}}), tmp_path)
        assert "does not decode" in report.findings[0].message

    def test_malformed_json_raises_with_position(self, tmp_path):
        with pytest.raises(CaptionParseError) as exc:
            validate_captions('{"a.png": {"caption": }', tmp_path)
        assert "line 1" in str(exc.value)

    def test_non_object_top_level(self, tmp_path):
        report = validate_captions("[1, 2]", tmp_path)
        assert not report.ok

    def test_load_dataset_sorted(self, tmp_path):
        doc = captions_doc(tmp_path, ["b.png", "a.png"])
        ds = load_caption_dataset(doc, tmp_path)
        assert list(ds.entries) == ["a.png", "b.png"]


def oracle_best_bucket(w: int, h: int, cfg: BucketConfig) -> tuple[int, int]:
    """Exhaustive argmin over every legal bucket, same tie-breaks."""
    best = None
    best_key = None
    target = math.log(w / h)
    step = cfg.dim_step
    for bw in range(step, cfg.max_reso * cfg.max_reso // step + 1, step):
        for bh in range(step, cfg.max_reso * cfg.max_reso // bw + 1, step):
            if bw * bh > cfg.max_reso * cfg.max_reso:
                continue
            key = (abs(math.log(bw / bh) - target), -bw * bh, bw)
            if best_key is None or key < best_key:
                best, best_key = (bw, bh), key
    return best


class TestBuckets:
    def test_exact_fit_square(self):
        cfg = BucketConfig()
        assert assign_buckets([(1024, 1024)], cfg) == [(1024, 1024)]

    def test_small_square_gets_full_square_bucket(self):
        cfg = BucketConfig()
        assert assign_buckets([(512, 512)], cfg) == [(1024, 1024)]

    def test_hd_frame_matches_bruteforce(self):
        cfg = BucketConfig()
        got = assign_buckets([(1920, 1080)], cfg)[0]
        assert got == oracle_best_bucket(1920, 1080, cfg)

    @pytest.mark.parametrize("dims", [(640, 480), (333, 777), (4000, 1000)])
    def test_more_shapes_match_bruteforce(self, dims):
        cfg = BucketConfig(max_reso=512, dim_step=64)
        assert assign_buckets([dims], cfg)[0] == oracle_best_bucket(*dims, cfg)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4096), st.integers(1, 4096))
    def test_constraints_always_hold(self, w, h):
        cfg = BucketConfig()
        bw, bh = assign_buckets([(w, h)], cfg)[0]
        assert bw % cfg.dim_step == 0 and bh % cfg.dim_step == 0
        assert bw * bh <= cfg.max_reso * cfg.max_reso

    def test_disabled_bucketing_uses_base_resolution(self):
        cfg = BucketConfig(enabled=False)
        assert assign_buckets([(123, 456)], cfg) == [(1024, 1024)]

    def test_enumeration_is_legal(self):
        cfg = BucketConfig(max_reso=256, dim_step=64)
        for bw, bh in enumerate_buckets(cfg):
            assert bw % 64 == 0 and bh % 64 == 0 and bw * bh <= 256 * 256

    def test_geometry_validation(self):
        with pytest.raises(ConfigError):
            BucketConfig(max_reso=1000, dim_step=64)


def synthetic_dataset(n: int) -> CaptionDataset:
    return CaptionDataset(root_dir=Path("."), entries={f"img_{i:04d}.png": "a player" for i in range(n)})


class TestManifest:
    def test_460_times_5_is_2300(self):
        rows = expand_manifest(synthetic_dataset(460), AugmentConfig(num_repeats=5), seed=1)
        assert len(rows) == 2300

    def test_no_repeats_no_flip_is_permutation(self):
        ds = synthetic_dataset(10)
        rows = expand_manifest(ds, AugmentConfig(flip_aug=False, num_repeats=1), seed=2)
        assert sorted(r.path for r in rows) == sorted(ds.entries)
        assert all(not r.flip for r in rows)

    def test_same_seed_reproducible(self):
        ds = synthetic_dataset(50)
        aug = AugmentConfig(num_repeats=3)
        a = expand_manifest(ds, aug, seed=9)
        b = expand_manifest(ds, aug, seed=9)
        assert a == b
        c = expand_manifest(ds, aug, seed=10)
        assert a != c

    def test_flips_vary_per_row(self):
        ds = synthetic_dataset(5)
        rows = expand_manifest(ds, AugmentConfig(flip_aug=True, num_repeats=40), seed=3)
        by_path = {}
        for r in rows:
            by_path.setdefault(r.path, set()).add(r.flip)
        # with 40 repeats a path all-heads is ~1e-12, so both values appear
        assert all(flips == {True, False} for flips in by_path.values())

    @given(st.integers(1, 40), st.integers(1, 8))
    @settings(max_examples=30, deadline=None)
    def test_length_is_exact_product(self, n, repeats):
        rows = expand_manifest(synthetic_dataset(n), AugmentConfig(num_repeats=repeats), seed=0)
        assert len(rows) == n * repeats

    def test_repeats_validated(self):
        with pytest.raises(ConfigError):
            AugmentConfig(num_repeats=0)


class TestLoraArithmetic:
    def test_half_strength(self):
        assert effective_lora_strength(8, 16) == 0.5

    def test_full_strength(self):
        assert effective_lora_strength(8, 8) == 1.0

    def test_alpha_above_dim_rejected(self):
        with pytest.raises(ConfigError):
            effective_lora_strength(16, 8)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            effective_lora_strength(0, 8)

    @given(st.integers(1, 256), st.integers(1, 256))
    def test_exactness(self, alpha, dim):
        if alpha > dim:
            with pytest.raises(ConfigError):
                effective_lora_strength(alpha, dim)
        else:
            assert effective_lora_strength(alpha, dim) * dim == alpha


class TestTrainingPlan:
    def test_paper_configuration(self):
        plan = training_plan(460, AugmentConfig(num_repeats=5), 4, 2, 1, 10)
        assert plan.samples_per_epoch == 2300
        assert plan.steps_per_epoch == 288
        assert plan.total_steps == 2880

    def test_minimal(self):
        plan = training_plan(1, AugmentConfig(num_repeats=1), 1, 1, 1, 1)
        assert (plan.samples_per_epoch, plan.steps_per_epoch, plan.total_steps) == (1, 1, 1)

    @given(st.integers(1, 500), st.integers(1, 6), st.integers(1, 8), st.integers(1, 4))
    @settings(max_examples=50, deadline=None)
    def test_doubling_gpus_halves_steps_up_to_ceiling(self, n, repeats, batch, gpus):
        aug = AugmentConfig(num_repeats=repeats)
        one = training_plan(n, aug, batch, gpus, 1, 1)
        two = training_plan(n, aug, batch, 2 * gpus, 1, 1)
        assert two.steps_per_epoch == math.ceil(one.samples_per_epoch / (batch * 2 * gpus))
        assert two.steps_per_epoch <= one.steps_per_epoch

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            training_plan(0, AugmentConfig(), 4, 2, 1, 10)


class TestEmitters:
    def test_dataset_toml_matches_golden(self):
        text = emit_dataset_toml(
            BucketConfig(),
            AugmentConfig(),
            image_dir="/workspace/imgs",
            metadata_file="/workspace/captions_kohya.json",
        )
        assert text == (GOLDEN / "dataset.toml").read_text()

    def test_dataset_toml_parses_with_real_parser(self):
        import tomli

        text = emit_dataset_toml(
            BucketConfig(),
            AugmentConfig(num_repeats=1),
            image_dir="/workspace/imgs",
            metadata_file="/workspace/captions_kohya.json",
        )
        doc = tomli.loads(text)
        ds = doc["datasets"][0]
        assert ds["resolution"] == [1024, 1024]
        assert ds["enable_bucket"] is True
        assert ds["max_bucket_reso"] == 1024
        subset = ds["subsets"][0]
        assert subset["image_dir"] == "/workspace/imgs"
        assert subset["metadata_file"] == "/workspace/captions_kohya.json"
        assert subset["flip_aug"] is True
        assert subset["num_repeats"] == 1
        assert subset["shuffle_caption"] is False

    def test_toml_byte_stable(self):
        make = lambda: emit_dataset_toml(BucketConfig(), AugmentConfig(), "/i", "/m.json")
        assert make() == make()

    def test_train_command_matches_golden(self):
        assert render_train_command(TrainRunConfig()) == (GOLDEN / "launch_args.txt").read_text()

    def test_train_command_key_flags(self):
        joined = " ".join(emit_train_command(TrainRunConfig()))
        for needle in (
            "--discrete_flow_shift 3.1582",
            "--network_dim 8",
            "--network_alpha 8",
            "--learning_rate 1e-4",
            "--optimizer_type adamw8bit",
            "--timestep_sampling shift",
            "--seed 42",
            "--guidance_scale 1.0",
            "--mixed_precision bf16",
            "--sdpa",
            "--highvram",
            "--gradient_checkpointing",
            "--cache_latents_to_disk",
            "--cache_text_encoder_outputs_to_disk",
            "--network_train_unet_only",
        ):
            assert needle in joined, needle

    def test_train_command_byte_stable(self):
        assert emit_train_command(TrainRunConfig()) == emit_train_command(TrainRunConfig())

    def test_alpha_above_dim_refused(self):
        cfg = TrainRunConfig(network_alpha=16, network_dim=8)
        with pytest.raises(ConfigError):
            emit_train_command(cfg)

    def test_nonpositive_numeric_refused(self):
        with pytest.raises(ConfigError):
            TrainRunConfig(learning_rate=0.0).validate()

    def test_passthrough_flags_configurable(self):
        cfg = TrainRunConfig(passthrough_flags=("sdpa",))
        joined = " ".join(emit_train_command(cfg))
        assert "--sdpa" in joined and "--highvram" not in joined


class TestLossLog:
    def test_monotone_series_not_diverged(self):
        records = [(i, 1.0 / (i + 1)) for i in range(20)]
        summary = parse_loss_log(records)
        assert not summary.diverged
        assert summary.initial == 1.0

    def test_flat_series(self):
        summary = parse_loss_log([(i, 0.4) for i in range(10)])
        assert summary.plateau_mean == 0.4
        assert summary.plateau_std == 0.0

    def test_sharp_drop_then_noise_matches_spreadsheet(self):
        losses = [2.0, 1.2, 0.8, 0.5, 0.42, 0.39, 0.41, 0.40, 0.38, 0.43]
        records = list(enumerate(losses))
        summary = parse_loss_log(records)
        plateau = losses[len(losses) // 2 :]
        assert summary.plateau_mean == pytest.approx(statistics.fmean(plateau), abs=1e-12)
        assert summary.plateau_std == pytest.approx(statistics.pstdev(plateau), abs=1e-12)
        assert not summary.diverged

    def test_divergence_flagged(self):
        summary = parse_loss_log([(0, 0.1), (1, 0.5), (2, 0.9), (3, 1.4)])
        assert summary.diverged

    def test_too_few_records(self):
        with pytest.raises(ValueError):
            parse_loss_log([(0, 1.0)])

    def test_text_parser(self):
        text = "# step,loss\n0,2.0\n1 1.5\n\n2,1.0\n"
        assert parse_loss_text(text) == [(0.0, 2.0), (1.0, 1.5), (2.0, 1.0)]
        with pytest.raises(ValueError):
            parse_loss_text("1,2,3")
