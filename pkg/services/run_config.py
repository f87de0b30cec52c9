"""
Run Config
Schema, parser and canonical echo for `section.key=value` run configuration
files, plus the command-line overrides applied on top of them
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from dotenv.parser import parse_stream
from rapidfuzz import process

from config.catalog import ENV_CATALOG
from services.agent import Hyperparams
from services.environments import EnvConfig, ObservationSpec
from services.errors import ConfigError
from services.model import ModelConfig

logger = logging.getLogger(__name__)

AUTO = "auto"
SECTIONS = ("env", "model", "agent", "harness")


@dataclass(frozen=True)
class ModelOptions:
    """Model section before the environment fixes the observation layout"""
    kind: str = "dtqn"
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 2
    context_len: int = 50
    embed_per_feature: int = 8
    pos_kind: str = "learned"
    combine_kind: str = "residual"
    norm_placement: str = "post"
    gate_bias: float = 2.0

    def __post_init__(self):
        # shape and variant checks that do not depend on the environment
        self.to_config(ObservationSpec(1, None), 1)

    def to_config(self, obs_spec: ObservationSpec, action_count: int) -> ModelConfig:
        return ModelConfig(obs_spec=obs_spec, action_count=action_count, **{
            f.name: getattr(self, f.name) for f in fields(self)
        })


@dataclass(frozen=True)
class HarnessOptions:
    seed: int = 0
    eval_period: int = 5_000
    eval_episodes: int = 10
    checkpoint_period: int = 0  # 0 = only at the end (and at --stop-at)

    def __post_init__(self):
        if self.eval_period < 1:
            raise ConfigError(f"eval_period must be >= 1, got {self.eval_period}")
        if self.eval_episodes < 1:
            raise ConfigError(f"eval_episodes must be >= 1, got {self.eval_episodes}")
        if self.checkpoint_period < 0:
            raise ConfigError(f"checkpoint_period must be >= 0, got {self.checkpoint_period}")


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = EnvConfig()
    model: ModelOptions = ModelOptions()
    agent: Hyperparams = Hyperparams()
    harness: HarnessOptions = HarnessOptions()


# -- value parsers ---------------------------------------------------------


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true or false, got '{raw}'")


def _parse_int(raw: str) -> int:
    return int(raw.replace("_", ""))


def _auto_int(raw: str) -> Any:
    return AUTO if raw.strip().lower() == AUTO else _parse_int(raw)


def _parse_str(raw: str) -> str:
    return raw.strip()


# section -> key -> (dataclass field, parser)
SCHEMA: Dict[str, Dict[str, Tuple[str, Callable[[str], Any]]]] = {
    "env": {
        "id": ("env_id", _parse_str),
        "grid_size": ("grid_size", _parse_int),
        "pairs": ("pairs", _parse_int),
        "line_bound": ("line_bound", float),
        "step_cap": ("step_cap", _parse_int),
        "pomdp_file": ("pomdp_file", _parse_str),
        "seed": ("seed", _parse_int),
    },
    "model": {
        "kind": ("kind", _parse_str),
        "d_model": ("d_model", _auto_int),
        "n_heads": ("n_heads", _parse_int),
        "n_layers": ("n_layers", _parse_int),
        "context_len": ("context_len", _parse_int),
        "embed_per_feature": ("embed_per_feature", _parse_int),
        "pos_kind": ("pos_kind", _parse_str),
        "combine_kind": ("combine_kind", _parse_str),
        "norm_placement": ("norm_placement", _parse_str),
        "gate_bias": ("gate_bias", float),
    },
    "agent": {
        "lr": ("lr", float),
        "batch_size": ("batch_size", _parse_int),
        "buffer_capacity": ("buffer_capacity", _parse_int),
        "target_update_period": ("target_update_period", _parse_int),
        "total_steps": ("total_steps", _auto_int),
        "eps_start": ("eps_start", float),
        "eps_end": ("eps_end", float),
        "eps_anneal_fraction": ("eps_anneal_fraction", float),
        "gamma": ("gamma", float),
        "prefill": ("prefill", _parse_int),
        "double_dqn": ("double_dqn", _parse_bool),
        "intermediate_q": ("intermediate_q", _parse_bool),
        "grad_clip": ("grad_clip", float),
        "adam_beta1": ("adam_beta1", float),
        "adam_beta2": ("adam_beta2", float),
        "adam_eps": ("adam_eps", float),
    },
    "harness": {
        "seed": ("seed", _parse_int),
        "eval_period": ("eval_period", _parse_int),
        "eval_episodes": ("eval_episodes", _parse_int),
        "checkpoint_period": ("checkpoint_period", _parse_int),
    },
}

ALL_KEYS = [f"{section}.{key}" for section in SECTIONS for key in SCHEMA[section]]


def _suggest(name: str) -> str:
    match = process.extractOne(name, ALL_KEYS, score_cutoff=60)
    return f" (did you mean '{match[0]}'?)" if match else ""


def _split_key(name: str, line: Optional[int], source: Optional[str]) -> Tuple[str, str]:
    section, dot, key = name.partition(".")
    if not dot or not key:
        raise ConfigError(f"key '{name}' must look like section.key{_suggest(name)}", line, source)
    if section not in SCHEMA:
        raise ConfigError(
            f"unknown section '{section}' in '{name}' (sections: {', '.join(SECTIONS)}){_suggest(name)}",
            line, source,
        )
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key '{name}'{_suggest(name)}", line, source)
    return section, key


def _parse_assignments(
    assignments: Iterable[Tuple[str, str, Optional[int], Optional[str]]]
) -> Dict[str, Dict[str, Tuple[Any, Optional[int], Optional[str]]]]:
    """(name, raw value, line, source) -> section -> key -> (value, line, source)"""
    parsed: Dict[str, Dict[str, Tuple[Any, Optional[int], Optional[str]]]] = {s: {} for s in SECTIONS}
    for name, raw, line, source in assignments:
        section, key = _split_key(name.strip(), line, source)
        _, parser = SCHEMA[section][key]
        try:
            value = parser(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for '{name}': {e}", line, source) from e
        parsed[section][key] = (value, line, source)
    return parsed


def _read_text(text: str, source: str) -> List[Tuple[str, str, Optional[int], Optional[str]]]:
    assignments = []
    for binding in parse_stream(io.StringIO(text)):
        # a binding's original text starts with any blank lines before it
        raw = binding.original.string
        line = binding.original.line + raw[: len(raw) - len(raw.lstrip())].count("\n")
        if binding.error:
            raise ConfigError(f"cannot parse '{raw.strip()}' (expected section.key=value)", line, source)
        if binding.key is None:
            continue
        if binding.value is None:
            raise ConfigError(f"'{binding.key}' has no value", line, source)
        assignments.append((binding.key, binding.value, line, source))
    return assignments


def _read_overrides(overrides: Iterable[str]) -> List[Tuple[str, str, Optional[int], Optional[str]]]:
    assignments = []
    for index, override in enumerate(overrides, start=1):
        name, eq, raw = override.partition("=")
        if not eq:
            raise ConfigError(f"override '{override}' must look like section.key=value", source=f"override #{index}")
        assignments.append((name, raw, None, f"override #{index}"))
    return assignments


def _build_section(values: Dict[str, Tuple[Any, Optional[int], Optional[str]]], section: str, base):
    kwargs = {SCHEMA[section][key][0]: value for key, (value, _, _) in values.items()}
    try:
        return replace(base, **kwargs)
    except ConfigError as e:
        # attach the location of the last line that touched this section
        lines = [(line, source) for _, line, source in values.values() if line is not None or source]
        line, source = lines[-1] if lines else (None, None)
        if e.line is None and e.source is None:
            raise ConfigError(str(e), line, source) from e
        raise


def build_run_config(text: str = "", overrides: Iterable[str] = (), source: str = "<config>") -> RunConfig:
    """Parse config text, apply overrides, resolve `auto` values from the env catalog"""
    parsed = _parse_assignments(_read_text(text, source) + _read_overrides(overrides))

    env = _build_section(parsed["env"], "env", EnvConfig())
    if env.env_id not in ENV_CATALOG:
        line, src = parsed["env"].get("id", (None, None, source))[1:]
        raise ConfigError(
            f"unknown environment '{env.env_id}' (known: {', '.join(sorted(ENV_CATALOG))})", line, src
        )
    catalog = ENV_CATALOG[env.env_id]

    model_values = dict(parsed["model"])
    if model_values.get("d_model", (AUTO,))[0] == AUTO:
        model_values["d_model"] = (catalog["d_model"], None, None)
    model = _build_section(model_values, "model", ModelOptions())

    agent_values = dict(parsed["agent"])
    if agent_values.get("total_steps", (AUTO,))[0] == AUTO:
        agent_values["total_steps"] = (catalog["total_steps"], None, None)
    agent = _build_section(agent_values, "agent", Hyperparams())

    harness = _build_section(parsed["harness"], "harness", HarnessOptions())

    config = RunConfig(env=env, model=model, agent=agent, harness=harness)
    logger.debug(f"Run config resolved for {env.env_id}: d_model={model.d_model}, total_steps={agent.total_steps}")
    return config


def load_run_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    if path is None:
        return build_run_config("", overrides)
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file '{path}' not found")
    return build_run_config(config_path.read_text(), overrides, source=config_path.name)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config: RunConfig) -> str:
    """Canonical echo: every key, resolved values, fixed order"""
    objects = {"env": config.env, "model": config.model, "agent": config.agent, "harness": config.harness}
    lines = ["# resolved run configuration"]
    for section in SECTIONS:
        lines.append(f"# [{section}]")
        for key, (attr, _) in SCHEMA[section].items():
            lines.append(f"{section}.{key}={_format(getattr(objects[section], attr))}")
    return "\n".join(lines) + "\n"
