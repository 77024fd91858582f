"""YAML run configuration with dotted-path overrides and field-path validation."""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "workers": 0,
    "deterministic": True,
    "data": {
        "root": None,
        "layout": "market1501",
        "image_size": [256, 128],
    },
    "embedder": {
        "arch": "small-cnn",
        "weights": None,
        "embedding_dim": None,
        "epochs": 30,
        "lr": 1e-3,
        "ids_per_batch": 8,
        "images_per_id": 4,
        "triplet_margin": 0.3,
        "erasing_prob": 0.5,
    },
    "blackbox": {
        "arch": None,
        "weights": None,
    },
    "generator": {
        "checkpoint": None,
        "mode": "untargeted",
        "epochs": 100,
        "lr": 2e-4,
        "batch_size": 16,
        "optimizer": "adam",
        "schedule": "cosine",
        "patch_size": [64, 64],
        "lambda_pull": 1.0,
        "lambda_push": 0.5,
        "tau": 0.3,
        "push_form": "prose_hinge",
        "backbone": {"arch": "residual-50", "seed": 0, "weights": "random"},
        "transform": {
            "rotation": [-15.0, 15.0],
            "scale": [0.8, 1.2],
            "perspective": 0.05,
            "blur_sigma": [0.0, 1.0],
            "brightness": [-0.1, 0.1],
            "contrast": [-0.1, 0.1],
        },
        "naturalistic": False,
        "natural_method": "diffusion",
        "latent_weight": 0.01,
        "lambda_adv": 1.0,
        "checkpoint_every": 0,
    },
    "naturalizer": {
        "pipeline_dir": None,
        "reference_image": None,
    },
    "evaluate": {
        "conditions": ["no_patch", "random_patch", "adversarial_patch"],
        "metric": "cosine",
        "placement": "center",
        "tau_asr": 0.5,
        "num_pairs": 200,
        "strips": 3,
    },
    "sweep": {
        "sizes": [32, 48, 64],
        "mode": "rescale",
    },
    "explain": {
        "num_samples": 16,
        "layer": "last",
    },
}

_CHOICES = {
    "data.layout": ("market1501", "dukemtmc", "face_folder", "synthetic"),
    "embedder.arch": ("small-cnn", "residual-50", "osnet-like"),
    "generator.mode": ("targeted", "untargeted"),
    "generator.optimizer": ("sgd", "adam"),
    "generator.schedule": ("cosine", "constant"),
    "generator.push_form": ("prose_hinge", "printed"),
    "generator.natural_method": ("diffusion", "gan"),
    "evaluate.metric": ("cosine", "euclidean"),
    "evaluate.placement": ("random", "center"),
    "sweep.mode": ("rescale", "retrain"),
}

_POSITIVE = ("generator.epochs", "generator.lr", "generator.batch_size", "embedder.epochs", "embedder.lr")


def _merge(base: dict, override: dict, prefix="") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        path = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(path, "unknown field")
        if isinstance(out[key], dict) and out[key] and isinstance(value, dict):
            out[key] = _merge(out[key], value, path + ".")
        else:
            out[key] = value
    return out


def set_dotted(cfg: dict, dotted: str, raw_value: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node.get(k), dict):
            raise ConfigError(".".join(keys[:i + 1]), "unknown field")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(dotted, "unknown field")
    node[keys[-1]] = yaml.safe_load(raw_value)


def get_dotted(cfg: dict, dotted: str):
    node = cfg
    for k in dotted.split("."):
        node = node[k]
    return node


def load_config(path=None, overrides=()) -> dict:
    """Defaults <- YAML file <- ``key.path=value`` overrides."""
    user = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("<config>", f"file not found: {p}")
        try:
            user = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("<config>", f"invalid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("<config>", "top level must be a mapping")
    cfg = _merge(DEFAULTS, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, value = item.split("=", 1)
        set_dotted(cfg, key.strip(), value)
    return cfg


def validate(cfg: dict, command: str) -> None:
    """Check values and every path the command will read, before any work starts."""
    for dotted, choices in _CHOICES.items():
        value = get_dotted(cfg, dotted)
        if value is not None and value not in choices:
            raise ConfigError(dotted, f"must be one of {choices}, got {value!r}")
    for dotted in _POSITIVE:
        value = get_dotted(cfg, dotted)
        if not isinstance(value, (int, float)) or value <= 0:
            raise ConfigError(dotted, f"must be a positive number, got {value!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed", "must be an integer")
    tau = cfg["generator"]["tau"]
    if not isinstance(tau, (int, float)) or not -1 <= tau <= 1:
        raise ConfigError("generator.tau", "must lie in [-1, 1]")
    for dotted in ("data.image_size", "generator.patch_size"):
        value = get_dotted(cfg, dotted)
        if not (isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) and v > 0 for v in value)):
            raise ConfigError(dotted, "must be a [height, width] pair of positive integers")

    root = cfg["data"]["root"]
    if root is None:
        raise ConfigError("data.root", "required")
    if not Path(root).is_dir():
        raise ConfigError("data.root", f"directory not found: {root}")

    needs_embedder = command in ("train-generator", "evaluate", "sweep", "explain")
    if needs_embedder:
        w = cfg["embedder"]["weights"]
        if w is None:
            raise ConfigError("embedder.weights", "required for this command")
        if not Path(w).is_file():
            raise ConfigError("embedder.weights", f"file not found: {w}")
    if command in ("sweep", "explain") or (command == "evaluate" and set(cfg["evaluate"]["conditions"]) - {"no_patch", "random_patch"}):
        c = cfg["generator"]["checkpoint"]
        if c is None:
            raise ConfigError("generator.checkpoint", "required for this command")
        if not Path(c).is_file():
            raise ConfigError("generator.checkpoint", f"file not found: {c}")
    if command == "evaluate":
        bad = set(cfg["evaluate"]["conditions"]) - {"no_patch", "random_patch", "adversarial_patch", "naturalistic_patch"}
        if bad:
            raise ConfigError("evaluate.conditions", f"unknown conditions {sorted(bad)}")
        bb = cfg["blackbox"]
        if bb["weights"] is not None and not Path(bb["weights"]).is_file():
            raise ConfigError("blackbox.weights", f"file not found: {bb['weights']}")
        if bb["weights"] is not None and bb["arch"] is None:
            raise ConfigError("blackbox.arch", "required when blackbox.weights is set")
    gen = cfg["generator"]
    uses_diffusion = gen["naturalistic"] and gen["natural_method"] == "diffusion"
    if uses_diffusion and command in ("train-generator", "evaluate", "sweep", "explain"):
        nat = cfg["naturalizer"]
        if nat["pipeline_dir"] is None or not Path(nat["pipeline_dir"]).is_dir():
            raise ConfigError("naturalizer.pipeline_dir", f"directory not found: {nat['pipeline_dir']}")
        if nat["reference_image"] is None or not Path(nat["reference_image"]).is_file():
            raise ConfigError("naturalizer.reference_image", f"file not found: {nat['reference_image']}")
    if command == "sweep":
        sizes = cfg["sweep"]["sizes"]
        if not isinstance(sizes, list) or not sizes:
            raise ConfigError("sweep.sizes", "must be a non-empty list")
