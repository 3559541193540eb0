"""Named experiment presets as plain config dictionaries."""

from __future__ import annotations

import copy
import math

from dare_lab.errors import ConfigError

# Three families, most prompts saturated (trivial or out of reach) at the
# start, per-prompt quirks so greedy accuracy moves smoothly.
STANDARD_WORLD = {
    "n_prompts": 128,
    "vocab": 6,
    "t_max": 6,
    "family_weights": [0.4, 0.2, 0.4],
    "prompt_noise": 1.0,
    "filler_bias": 0.5,
}

_STANDARD = {
    "world": STANDARD_WORLD,
    "estimator": {"method": "snis"},
    "sampler": {"kappa": 10.0},
    "trainer": {"lr": 0.3},
    "run": {"n_steps": 200, "eval_every": 5, "eval_set_size": 256, "label": "dare"},
}

# plain GRPO: uniform sampling, one tier, fresh rollouts only, no hints
_UNIFORM_GRPO = {
    "estimator": {"method": "random"},
    "sampler": {"sampler_mode": "uniform"},
    "trainer": {"adaptive": False, "sigma": 1.0, "hints": False},
    "run": {"label": "uniform_grpo"},
}

_DRIFT = {
    "world": {
        "n_prompts": 256,
        "vocab": 6,
        "t_max": 6,
        "family_weights": [0.2, 0.6, 0.2],
        "prompt_noise": 1.0,
        "filler_bias": 0.5,
        "n_reference": 64,
    },
    "estimator": {
        "method": "snis",
        "reference_g": 32,
        "coldstart_sharpness": 16.0,
        "bench_methods": ["snis", "prev_fr", "random", "coldstart", "bayes", "entropy", "current_fr"],
        "tau_sweep": [1.0, 2.0, 3.0, 4.0, 5.0],
    },
    "sampler": {"kappa": 10.0},
    "trainer": {"lr": 0.3},
    "run": {
        "n_steps": 100,
        "eval_every": 10,
        "eval_set_size": 64,
        "label": "drift_bench",
        "drift": {"start": 30, "every": 10, "scale": 0.7, "skill_scale": 0.5},
    },
}

_BOUND = {
    "run": {
        "label": "bound_check",
        "bound": {"replications": 1000, "k": 512, "clip": math.log(2.0), "delta": 0.05, "drift_scale": 0.3},
    },
}

PRESETS = {
    "standard": _STANDARD,
    "uniform_grpo": None,  # standard + _UNIFORM_GRPO
    "drift": _DRIFT,
    "bound": _BOUND,
}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def preset(name: str, **sections) -> dict:
    """Config dictionary for a named preset, with optional per-section overrides."""
    if name not in PRESETS:
        raise ConfigError("--preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = merge(_STANDARD, _UNIFORM_GRPO) if name == "uniform_grpo" else PRESETS[name]
    return merge(base, sections)
