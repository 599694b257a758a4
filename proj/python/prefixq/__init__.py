"""Python access to the prefixq library.

Configs travel as JSON text; `config()` and `overrides()` give dict views.
"""

import json

from ._core import (
    Checkpoint,
    Dataset,
    Episode,
    Error,
    ablation_knobs,
    apply_overrides,
    estimate_action_complexity,
    evaluate,
    generate_dataset,
    integrate_flow,
    preset_config,
    quantization_step,
    quantize,
    quantize_rows,
    summarize_quotient,
    tc_hinge,
    temporal_complexity,
    train,
)


def config(preset="desk", overrides=()):
    """Config as a dict, starting from a preset."""
    text = preset_config(preset)
    if overrides:
        text = apply_overrides(text, list(overrides))
    return json.loads(text)


def config_json(cfg):
    return json.dumps(cfg)


__all__ = [
    "Checkpoint",
    "Dataset",
    "Episode",
    "Error",
    "ablation_knobs",
    "apply_overrides",
    "config",
    "config_json",
    "estimate_action_complexity",
    "evaluate",
    "generate_dataset",
    "integrate_flow",
    "preset_config",
    "quantization_step",
    "quantize",
    "quantize_rows",
    "summarize_quotient",
    "tc_hinge",
    "temporal_complexity",
    "train",
]
