"""
Unit tests for the command-line surface: override parsing, exit codes and
the cheap failure paths of main().
"""

import pytest

from mfa_replay.cli import (
    EXIT_DATA,
    EXIT_RUNTIME,
    EXIT_USAGE,
    TOY_SPEC_NAME,
    domain_roots,
    ensure_toy_data,
    exit_code_for,
    main,
    parse_overrides,
    run_dir_for,
    taxonomy_for,
)
from mfa_replay.config import RuntimeConfig
from mfa_replay.errors import (
    CorruptCheckpointError,
    DivergenceError,
    ImageReadError,
    ManifestChecksumError,
    PhaseFailedError,
    PreconditionError,
    UsageError,
)
from mfa_replay.loaders.images import MANIFEST_NAME
from mfa_replay.recipes import resolve_recipe


@pytest.mark.unit
class TestParseOverrides:
    def test_space_and_equals_forms(self):
        overrides = parse_overrides(["--train.lambda_ld", "2.0", "--train.disable_mfa=true", "--seeds", "[0, 1]"])
        assert overrides == {"train.lambda_ld": 2.0, "train.disable_mfa": True, "seeds": [0, 1]}

    def test_value_may_contain_equals(self):
        assert parse_overrides(["--name=a=b"]) == {"name": "a=b"}

    def test_empty(self):
        assert parse_overrides([]) == {}

    @pytest.mark.parametrize("tokens", [["stray"], ["--"], ["--train.lambda_ld"]])
    def test_malformed(self, tokens):
        with pytest.raises(UsageError):
            parse_overrides(tokens)


@pytest.mark.unit
class TestExitCodes:
    @pytest.mark.parametrize(
        "error,code",
        [
            (UsageError("x"), EXIT_USAGE),
            (FileNotFoundError("x"), EXIT_DATA),
            (ImageReadError("a.png", "truncated"), EXIT_DATA),
            (ManifestChecksumError("d/manifest.json", "ab", "cd"), EXIT_DATA),
            (CorruptCheckpointError("x"), EXIT_DATA),
            (DivergenceError("x"), EXIT_RUNTIME),
            (PreconditionError("x"), EXIT_RUNTIME),
            (RuntimeError("x"), EXIT_RUNTIME),
        ],
    )
    def test_mapping(self, error, code):
        assert exit_code_for(error) == code

    def test_phase_failure_uses_its_cause(self):
        assert exit_code_for(PhaseFailedError("adapt_gan", None, FileNotFoundError("x"))) == EXIT_DATA
        assert exit_code_for(PhaseFailedError("adapt_gan", None, DivergenceError("x"))) == EXIT_RUNTIME


@pytest.mark.unit
class TestRecipeData:
    def test_toy_roots_and_taxonomy(self):
        recipe = resolve_recipe("smoke")
        roots = domain_roots(recipe)
        assert [r.name for r in roots] == ["domain_0", "domain_1", "domain_2"]
        assert taxonomy_for(recipe).names == ("class_0", "class_1", "class_2", "class_3")
        assert run_dir_for(recipe, 3) == recipe.resolved_output_dir() / "seed_3"

    def test_directory_recipe_needs_two_roots(self, tmp_path):
        recipe = resolve_recipe("smoke", {"data.kind": "directory", "data.roots": [str(tmp_path)], "data.class_names": ["a", "b"]})
        with pytest.raises(UsageError):
            domain_roots(recipe)

    def test_directory_recipe_needs_class_names(self):
        recipe = resolve_recipe("smoke", {"data.kind": "directory"})
        with pytest.raises(UsageError):
            taxonomy_for(recipe)

    def test_toy_data_written_once(self, capture_logs):
        recipe = resolve_recipe("smoke")
        ensure_toy_data(recipe)
        data_root = recipe.resolved_data_root()
        assert (data_root / TOY_SPEC_NAME).is_file()
        manifest = data_root / "domain_1" / MANIFEST_NAME
        stamp = manifest.stat().st_mtime_ns

        ensure_toy_data(recipe)
        assert manifest.stat().st_mtime_ns == stamp

        ensure_toy_data(resolve_recipe("smoke", {"data.toy_seed": 8}))
        assert "regenerating" in capture_logs.text


@pytest.mark.unit
@pytest.mark.usefixtures("restore_logging")
class TestMainFailures:
    """main() turns every failure into an exit status instead of raising."""

    def test_unknown_command(self):
        assert main(["train-everything"]) == EXIT_USAGE

    def test_unknown_override_key(self):
        assert main(["run-sequence", "--recipe", "smoke", "--train.lamda_ld", "1.0", "--quiet"]) == EXIT_USAGE

    def test_unknown_recipe(self):
        assert main(["eval", "--recipe", "nope", "--quiet"]) == EXIT_USAGE

    @pytest.mark.parametrize("domain", [None, "0", "3"])
    def test_adapt_needs_a_target_domain(self, domain):
        argv = ["adapt", "--recipe", "smoke", "--quiet"]
        if domain is not None:
            argv += ["--domain", domain]
        assert main(argv) == EXIT_USAGE

    def test_segment_needs_an_image(self):
        assert main(["segment", "--recipe", "smoke", "--quiet"]) == EXIT_USAGE

    def test_eval_without_checkpoint(self, tmp_path):
        assert main(["eval", "--recipe", "smoke", "--quiet"]) == EXIT_DATA
        assert main(["eval", "--recipe", "smoke", "--checkpoint", str(tmp_path / "none"), "--quiet"]) == EXIT_DATA

    def test_invalid_runtime_setting(self, monkeypatch):
        monkeypatch.setenv("MFA_IO_RETRIES", "0")
        RuntimeConfig.reload()
        assert main(["eval", "--recipe", "smoke", "--quiet"]) == EXIT_USAGE
