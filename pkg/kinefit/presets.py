"""Hardcoded fit presets.

Learning rates decay exponentially from ``lr_start`` to ``lr_end``; both
presets span the same thousandfold range.
"""

# Format: preset_name -> FitConfig field overrides
PRESETS: dict[str, dict] = {
    # Small MLP and batch: 2000 steps on a two-trial synthetic session stay
    # under two minutes on one CPU core
    "desk": {
        "steps": 2000,
        "layer_sizes": (64, 128, 256, 256),
        "lr_start": 1e-3,
        "lr_end": 1e-6,
        "beta1": 0.8,
        "beta2": 0.999,
        "weight_decay": 1e-5,
        "batch_timepoints": 48,
        "ba_start_step": None,  # 0.75 * steps
        "ba_lr": 1e-4,
    },

    # Full-size network and schedule
    "full": {
        "steps": 40000,
        "layer_sizes": (128, 256, 512, 1024, 2048, 2048, 4096),
        "lr_start": 1e-4,
        "lr_end": 1e-7,
        "beta1": 0.8,
        "beta2": 0.999,
        "weight_decay": 1e-5,
        "batch_timepoints": 300,
        "ba_start_step": 30000,
        "ba_lr": 1e-5,
    },
}

# Aliases for common preset names
ALIASES: dict[str, str] = {
    "default": "desk",
    "full-scale": "full",
}


def get_preset(name: str) -> dict:
    """
    Field overrides for a named preset.

    Raises:
        KeyError: if neither an alias nor a preset matches.
    """
    key = ALIASES.get(name, name)
    if key not in PRESETS:
        known = ", ".join(sorted([*PRESETS, *ALIASES]))
        raise KeyError(f"unknown preset '{name}' (known: {known})")
    return dict(PRESETS[key])
