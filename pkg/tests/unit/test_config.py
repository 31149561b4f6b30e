"""
Unit tests for runtime settings, recipes and overrides.
"""

import pytest

from mfa_replay.config import (
    PRESETS,
    ExperimentRecipe,
    GridConfig,
    RuntimeConfig,
    SegmentationConfig,
    TrainingConfig,
    apply_overrides,
    config_hash,
    grid_points,
    load_recipe_file,
    parse_override_value,
    recipe_from_mapping,
)
from mfa_replay.errors import UsageError
from mfa_replay.recipes import list_recipes, recipe_mapping, resolve_recipe

# ============================================================================
# Runtime settings
# ============================================================================


@pytest.mark.unit
class TestRuntimeConfig:
    def test_reload_reads_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv("MFA_OUTPUT_ROOT", str(tmp_path / "elsewhere"))
        monkeypatch.setenv("LOG_LEVEL", "DEBUG")
        monkeypatch.setenv("LOG_JSON", "0")
        monkeypatch.setenv("MFA_NUM_WORKERS", "2")
        RuntimeConfig.reload()
        assert RuntimeConfig.OUTPUT_ROOT == str(tmp_path / "elsewhere")
        assert RuntimeConfig.LOG_LEVEL == "DEBUG"
        assert RuntimeConfig.LOG_JSON is False
        assert RuntimeConfig.NUM_WORKERS == 2

    def test_defaults_validate(self):
        RuntimeConfig.validate_required()

    @pytest.mark.parametrize(
        "name,value",
        [("LOG_LEVEL", "VERBOSE"), ("MFA_NUM_WORKERS", "-1"), ("MFA_IO_RETRIES", "0"), ("MFA_OUTPUT_ROOT", "")],
    )
    def test_invalid_settings(self, monkeypatch, name, value):
        monkeypatch.setenv(name, value)
        RuntimeConfig.reload()
        with pytest.raises(ValueError):
            RuntimeConfig.validate_required()

    def test_explicit_device(self):
        assert RuntimeConfig.resolve_device() == "cpu"

    def test_to_dict_lists_every_variable(self):
        assert set(RuntimeConfig.to_dict()) == {
            "MFA_OUTPUT_ROOT",
            "LOG_LEVEL",
            "LOG_JSON",
            "MFA_DEVICE",
            "MFA_NUM_WORKERS",
            "MFA_IO_RETRIES",
        }


# ============================================================================
# Experiment settings
# ============================================================================


@pytest.mark.unit
class TestTrainingConfig:
    def test_preset_fills_model(self):
        assert TrainingConfig().architecture == PRESETS["desk"]
        assert TrainingConfig(preset="full").architecture.widths == (64, 128, 256, 512)

    def test_unknown_tap_rejected(self):
        with pytest.raises(ValueError):
            TrainingConfig(mfa_taps=["stage1", "stage9"])

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError):
            TrainingConfig(lambda_xyz=1.0)

    def test_tap_selection_follows_ablation(self):
        config = TrainingConfig()
        assert config.gan_taps() == ["stage1", "stage2", "stage3", "stage4"]
        ablated = TrainingConfig(disable_mfa=True)
        assert ablated.gan_taps() == ["stage2"]
        assert ablated.uda_taps() == ["stage4"]

    def test_hash_is_stable_and_sensitive(self):
        assert config_hash(TrainingConfig()) == config_hash(TrainingConfig())
        assert config_hash(TrainingConfig()) != config_hash(TrainingConfig(lambda_r1=2.0))
        assert len(config_hash(TrainingConfig())) == 64


@pytest.mark.unit
class TestSegmentationConfig:
    def test_explicit_stride_wins(self):
        assert SegmentationConfig(window=128, stride=16).effective_stride == 16

    def test_tiny_window_has_stride_one(self):
        assert SegmentationConfig(window=2).effective_stride == 1


@pytest.mark.unit
class TestGridPoints:
    def test_cartesian_product_in_order(self):
        points = grid_points(GridConfig(lambda_ld=[0.5, 1.0], lambda_id=[1.0], lambda_r1=[1.0, 10.0]))
        assert points == [
            {"lambda_ld": 0.5, "lambda_id": 1.0, "lambda_r1": 1.0},
            {"lambda_ld": 0.5, "lambda_id": 1.0, "lambda_r1": 10.0},
            {"lambda_ld": 1.0, "lambda_id": 1.0, "lambda_r1": 1.0},
            {"lambda_ld": 1.0, "lambda_id": 1.0, "lambda_r1": 10.0},
        ]

    def test_default_grid_size(self):
        assert len(grid_points(GridConfig())) == 36

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            GridConfig(lambda_ld=[-1.0])


# ============================================================================
# Overrides and recipes
# ============================================================================


@pytest.mark.unit
class TestOverrides:
    @pytest.mark.parametrize(
        "raw,expected",
        [("1.0", 1.0), ("3", 3), ("true", True), ("[1, 2]", [1, 2]), ("stage4", "stage4"), ("a: [", "a: [")],
    )
    def test_parse_value(self, raw, expected):
        assert parse_override_value(raw) == expected

    def test_nested_keys(self):
        base = {"train": {"lambda_ld": 1.0, "optimizer": {"classifier_lr": 0.1}}}
        result = apply_overrides(base, {"train.lambda_ld": 2.0, "train.optimizer.generator_lr": 0.5})
        assert result["train"]["lambda_ld"] == 2.0
        assert result["train"]["optimizer"] == {"classifier_lr": 0.1, "generator_lr": 0.5}
        assert base["train"]["lambda_ld"] == 1.0

    def test_walk_through_scalar(self):
        with pytest.raises(UsageError):
            apply_overrides({"seeds": 3}, {"seeds.first": 1})

    def test_empty_key(self):
        with pytest.raises(UsageError):
            apply_overrides({}, {".": 1})


@pytest.mark.unit
class TestRecipes:
    def test_builtin_names(self):
        assert {"toy", "toy-lb", "toy-no-cg", "toy-no-mfa", "toy-partial", "smoke"} <= set(list_recipes())

    def test_builtin_mapping_is_a_copy(self):
        recipe_mapping("toy")["seeds"].append(99)
        assert recipe_mapping("toy")["seeds"] == [0, 1, 2]

    def test_resolve_with_overrides(self):
        recipe = resolve_recipe("toy-no-mfa", {"train.lambda_ld": 0.5, "seeds": [4]})
        assert isinstance(recipe, ExperimentRecipe)
        assert recipe.train.disable_mfa
        assert recipe.train.lambda_ld == 0.5
        assert recipe.seeds == [4]

    def test_unknown_recipe(self):
        with pytest.raises(UsageError):
            resolve_recipe("no-such-recipe")

    def test_unknown_key_is_usage_error(self):
        with pytest.raises(UsageError):
            recipe_from_mapping({"name": "x", "train": {"lamda_ld": 1.0}})

    def test_recipe_file(self, tmp_path):
        path = tmp_path / "mine.yaml"
        path.write_text("train:\n  lambda_id: 1.5\nseeds: [0, 1]\n", encoding="utf-8")
        recipe = resolve_recipe(path)
        assert recipe.name == "mine"
        assert recipe.train.lambda_id == 1.5
        assert recipe.seeds == [0, 1]

    def test_recipe_file_must_be_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(UsageError):
            load_recipe_file(path)

    def test_output_dir_under_output_root(self, tmp_path):
        recipe = resolve_recipe("smoke")
        assert recipe.resolved_output_dir() == (tmp_path / "runs" / "smoke").resolve()
        assert recipe.resolved_data_root() == (tmp_path / "runs" / "smoke" / "data").resolve()

    def test_absolute_output_dir_kept(self, tmp_path):
        recipe = resolve_recipe("smoke", {"output_dir": str(tmp_path / "abs")})
        assert recipe.resolved_output_dir() == (tmp_path / "abs").resolve()
