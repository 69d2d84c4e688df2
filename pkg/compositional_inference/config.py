"""
Run configuration: one JSON document per experiment.

Example::

    {
      "scenario": "chain4-inverse-prob",
      "seed": 42,
      "replicates": 10,
      "params": {"horizon": 10.0, "inner_iterations": 1}
    }
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Union

from compositional_inference.exceptions import ConfigInvalid

logger = logging.getLogger(__name__)

DEFAULT_SEED = 42
DEFAULT_REPLICATES = 10
DEFAULT_OUT = "results"
KNOWN_KEYS = ("scenario", "seed", "replicates", "threads", "out", "params")


def _require_int(data: Mapping[str, Any], key: str, default: int, minimum: int) -> int:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigInvalid(f"'{key}' must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigInvalid(f"'{key}' must be >= {minimum}, got {value}")
    return value


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    seed: int = DEFAULT_SEED
    replicates: int = DEFAULT_REPLICATES
    threads: int = 1
    out: str = DEFAULT_OUT
    params: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """
        Validate and build a configuration.

        Raises:
            ConfigInvalid: On unknown keys, wrong types or out-of-range values
        """
        if not isinstance(data, Mapping):
            raise ConfigInvalid(f"Configuration must be a JSON object, got {type(data).__name__}")
        unknown = sorted(set(data) - set(KNOWN_KEYS))
        if unknown:
            logger.error(f"Unknown configuration keys {unknown}")
            raise ConfigInvalid(f"Unknown configuration keys: {', '.join(unknown)}")
        scenario = data.get("scenario")
        if not isinstance(scenario, str) or not scenario:
            raise ConfigInvalid("'scenario' must be a non-empty string")
        out = data.get("out", DEFAULT_OUT)
        if not isinstance(out, str) or not out:
            raise ConfigInvalid("'out' must be a non-empty path string")
        params = data.get("params", {})
        if not isinstance(params, Mapping):
            raise ConfigInvalid("'params' must be an object")
        return cls(
            scenario=scenario,
            seed=_require_int(data, "seed", DEFAULT_SEED, 0),
            replicates=_require_int(data, "replicates", DEFAULT_REPLICATES, 1),
            threads=_require_int(data, "threads", 1, 1),
            out=out,
            params=dict(params),
        )

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigInvalid(f"Cannot read configuration '{path}': {e}") from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"Configuration '{path}' is not valid JSON: {e.msg} (line {e.lineno})") from e
        return cls.from_dict(data)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Apply command-line overrides; ``None`` values leave fields untouched."""
        given = {key: value for key, value in overrides.items() if value is not None}
        if not given:
            return self
        return RunConfig.from_dict({**self.to_dict(), **given})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "replicates": self.replicates,
            "threads": self.threads,
            "out": self.out,
            "params": dict(self.params),
        }
