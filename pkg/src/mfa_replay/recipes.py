"""
Built-in experiment recipes.

Each recipe is a plain mapping so command-line overrides can be applied
before validation. The toy recipes encode the desk-scale protocols:

    toy             full method on the 3-domain toy sequence, 3 seeds
    toy-lb          source-only lower bound evaluated on every domain
    toy-no-cg       replay of source images only (generator never adapted)
    toy-no-mfa      single-tap discriminators instead of multi-scale aggregation
    toy-single      one source, one target (single-step adaptation)
    toy-partial     last target misses class 3 (partial-set adaptation)
    smoke           tiny step budgets for integration tests
"""

import copy
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from mfa_replay.config import ExperimentRecipe, apply_overrides, load_recipe_file, recipe_from_mapping
from mfa_replay.errors import UsageError

_TOY_DATA: Dict[str, Any] = {
    "kind": "toy",
    "num_domains": 3,
    "num_classes": 4,
    "samples_per_domain": 2000,
    "image_size": 32,
}

_TOY_TRAIN: Dict[str, Any] = {
    "preset": "desk",
    "batch_size": 32,
    "max_epochs": 40,
    "steps_per_epoch": 50,
    "patience": 5,
    "source_gan_steps": 4000,
    "target_gan_steps": 2000,
    "gan_eval_interval": 500,
}

_SEEDS = [0, 1, 2]


def _toy(name: str, train: Optional[Dict[str, Any]] = None, data: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "name": name,
        "data": {**_TOY_DATA, **(data or {})},
        "train": {**_TOY_TRAIN, **(train or {})},
        "seeds": list(_SEEDS),
    }


BUILTIN_RECIPES: Dict[str, Dict[str, Any]] = {
    "toy": _toy("toy"),
    "toy-lb": _toy("toy-lb", train={"disable_adaptation": True}),
    "toy-no-cg": _toy("toy-no-cg", train={"disable_cg": True}),
    "toy-no-mfa": _toy("toy-no-mfa", train={"disable_mfa": True}),
    "toy-single": _toy("toy-single", data={"num_domains": 2}),
    "toy-partial": _toy("toy-partial", data={"drop_classes": [3]}),
    "smoke": {
        "name": "smoke",
        "data": {**_TOY_DATA, "samples_per_domain": 64, "image_size": 16},
        "train": {
            "preset": "desk",
            "batch_size": 8,
            "max_epochs": 2,
            "steps_per_epoch": 2,
            "patience": 1,
            "source_gan_steps": 4,
            "target_gan_steps": 4,
            "gan_eval_interval": 2,
        },
        "segmentation": {"window": 16, "batch_size": 64},
        "seeds": [0],
    },
}


def list_recipes() -> List[str]:
    return sorted(BUILTIN_RECIPES)


def recipe_mapping(source: Union[str, Path]) -> Dict[str, Any]:
    """
    Mapping of a built-in recipe name or a YAML recipe file.

    Raises:
        UsageError: Neither a built-in name nor an existing file
    """
    if str(source) in BUILTIN_RECIPES:
        return copy.deepcopy(BUILTIN_RECIPES[str(source)])
    path = Path(source)
    if path.is_file():
        return load_recipe_file(path)
    raise UsageError(f"Unknown recipe '{source}'; built-in recipes: {', '.join(list_recipes())}")


def resolve_recipe(source: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> ExperimentRecipe:
    """Load a recipe and apply dotted overrides (command line > file > defaults)."""
    return recipe_from_mapping(apply_overrides(recipe_mapping(source), overrides or {}))
