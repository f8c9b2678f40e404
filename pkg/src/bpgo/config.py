"""JSON experiment configs: defaults, strict merging, and dotted-path overrides."""

from __future__ import annotations

import copy
import json
from typing import Any, Iterable

from .errors import ConfigError
from .policy_env import AmbiguousEnv, default_env
from .trainer import BpgoConfig

SECTIONS = ("env", "policy", "trainer", "output", "sweep")


def default_config() -> dict:
    env = default_env().to_dict()
    for p in env["prompts"]:
        p["baseline_reward"] = None
    return {
        "env": env,
        "policy": {"init_scale": 0.0},
        "trainer": BpgoConfig().to_dict(),
        "output": {"directory": "runs", "name": "run"},
        "sweep": {"parameter": None, "values": [], "seeds": [0]},
    }


def _merge(base: dict, user: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_value(text: str) -> Any:
    """JSON literal if it parses, else the raw string (``adam`` needs no quotes)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = cfg
    for i, key in enumerate(keys):
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config path {'.'.join(keys[: i + 1])!r}")
        if i == len(keys) - 1:
            node[key] = value
        else:
            node = node[key]


def parse_overrides(pairs: Iterable[str]) -> list:
    out = []
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form path=value")
        path, raw = pair.split("=", 1)
        out.append((path.strip(), parse_value(raw)))
    return out


def resolve(user: dict | None = None, overrides: Iterable = ()) -> dict:
    """Defaults <- user document <- overrides; validated and fully materialised."""
    if user is not None and not isinstance(user, dict):
        raise ConfigError("config document must be a JSON object")
    cfg = _merge(default_config(), user or {}, "")
    for path, value in overrides:
        apply_override(cfg, path, value)
    env, trainer = build(cfg)
    cfg["env"] = env.to_dict()
    cfg["trainer"] = trainer.to_dict()
    return cfg


def build(cfg: dict):
    """Instantiate (environment, trainer config) from a merged config dict."""
    try:
        env = AmbiguousEnv.from_dict(cfg["env"])
        trainer = BpgoConfig(**cfg["trainer"]).validate(env)
        scale = cfg["policy"]["init_scale"]
        if not float(scale) >= 0.0:
            raise ConfigError(f"policy.init_scale must be >= 0, got {scale}")
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return env, trainer


def load(path: str, overrides: Iterable = ()) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return resolve(user, overrides)
