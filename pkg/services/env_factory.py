"""
Environment Factory
Builds environments from an EnvConfig using the domain catalog
"""

from pathlib import Path
from typing import Optional

from config.catalog import ENV_CATALOG, HALLWAY_FILE
from config.settings import PROJECT_ROOT
from services.domains import CarFlag, GridverseMemory, HeavenHell, MemoryCards
from services.environments import EnvConfig, Environment, PomdpEnv
from services.errors import ConfigError
from services.pomdp_parser import load_pomdp


def resolve_pomdp_path(name: str, data_dir: Optional[str] = None) -> Path:
    """Accept a path, or the name of a file bundled in the data directory"""
    path = Path(name)
    if path.exists():
        return path
    bundled = Path(data_dir or PROJECT_ROOT / "data") / path.name
    if bundled.exists():
        return bundled
    raise ConfigError(f"pomdp file '{name}' not found (also looked in {bundled.parent})")


def make_env(config: EnvConfig, data_dir: Optional[str] = None) -> Environment:
    """Construct the environment named by config.env_id"""
    if config.env_id not in ENV_CATALOG:
        raise ConfigError(
            f"unknown environment '{config.env_id}' (known: {', '.join(sorted(ENV_CATALOG))})"
        )
    defaults = ENV_CATALOG[config.env_id]
    cap = config.step_cap or defaults["step_cap"]
    if config.step_cap < 0:
        raise ConfigError(f"step cap must be >= 1, got {config.step_cap}")

    env_id = config.env_id
    if env_id == "memory_cards":
        return MemoryCards(pairs=config.pairs, step_cap=cap)
    if env_id == "car_flag":
        return CarFlag(line_bound=config.line_bound, step_cap=cap)
    if env_id == "heaven_hell":
        return HeavenHell(step_cap=cap)
    if env_id.startswith("gv_memory"):
        size = defaults.get("grid_size", config.grid_size)
        return GridverseMemory(size=size, step_cap=cap)
    if env_id == "hallway":
        spec = load_pomdp(resolve_pomdp_path(config.pomdp_file or HALLWAY_FILE, data_dir))
        return PomdpEnv(spec, step_cap=cap, env_id="hallway")
    if not config.pomdp_file:
        raise ConfigError("env 'pomdp' needs env.pomdp_file")
    spec = load_pomdp(resolve_pomdp_path(config.pomdp_file, data_dir))
    return PomdpEnv(spec, step_cap=cap, env_id="pomdp")
