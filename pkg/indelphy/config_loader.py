import hashlib
import math
import os
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Tuple

from phylo.errors import ConfigError, ParameterDomainError
from phylo.tree_model import EdgeParams


@dataclass(frozen=True)
class ExperimentConfig:
    # tree
    tree_file: str = ""
    depth: int = 3
    p_sub: float = 0.05
    p_del: float = 0.0
    p_ins: float = 0.0
    tau_max: int = 1
    contemporaneous: bool = False
    lambda_min: float = 0.0
    # blocks / estimators
    k: int = 10000
    zeta: float = 0.01
    delta: float = 1.0
    r: float = 0.0
    deep_h: int = 2
    epsilon: float = 0.0
    resolve_margin: float = 1.0
    # run
    mode: str = "sym"
    trials: int = 1
    seed: int = 0
    out_dir: str = "runs"
    track_lineage: bool = False
    # regime
    asym_bound: float = 0.0
    beta: float = 1.0
    # validation
    slack: float = 1.0
    k_sweep: str = ""
    heights: str = "1,2,3,4,5,6"
    control_lambda: float = 0.45
    unbias_tolerance: float = 0.1
    deep_success: float = 0.9
    pairs_per_trial: int = 64
    # logging
    log_quartet_limit: int = 20000

    # ---------- derived values ----------

    def edge_params(self) -> EdgeParams:
        return EdgeParams(p_sub=self.p_sub, p_del=self.p_del, p_ins=self.p_ins)

    @property
    def k_root(self) -> int:
        """Root length handed to the simulator: 2k symmetric, k asymmetric."""
        return 2 * self.k if self.mode == "sym" else self.k

    def effective_epsilon(self, lambda_min: float) -> float:
        return self.epsilon if self.epsilon > 0 else lambda_min / 3.0

    def k_list(self) -> List[int]:
        if not self.k_sweep.strip():
            return [self.k]
        return [int(item) for item in self.k_sweep.split(",") if item.strip()]

    def height_list(self) -> List[int]:
        return [int(item) for item in self.heights.split(",") if item.strip()]

    def with_k(self, k: int) -> "ExperimentConfig":
        return replace(self, k=k)

    def canonical_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(name: str, value):
    kind = _FIELD_TYPES[name]
    if kind is bool:
        return value if isinstance(value, bool) else _parse_bool(str(value))
    if kind is int:
        if isinstance(value, bool):
            raise ValueError(f"{name} must be an integer")
        if isinstance(value, float):
            if not value.is_integer():
                raise ValueError(f"{name} must be an integer")
            return int(value)
        return int(str(value).strip())
    if kind is float:
        return float(value)
    return str(value).strip()


def _int_list(text: str) -> List[int]:
    return [int(item) for item in text.split(",") if item.strip()]


class ConfigLoader:
    """key=value experiment configuration (one pair per line, '#' comments)."""

    def __init__(self, config_path=None):
        self.config_path = config_path
        self.config = self._load_default_config()

    def _load_default_config(self) -> Dict[str, object]:
        defaults = {f.name: f.default for f in fields(ExperimentConfig)}
        env_out = os.environ.get("INDELPHY_OUT_DIR", "").strip()
        if env_out:
            defaults["out_dir"] = env_out
        return defaults

    def parse_text(self, text: str, source: str = "<config>") -> Dict[str, str]:
        raw: Dict[str, str] = {}
        for line_no, line in enumerate(text.splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{source}:{line_no}: expected key=value, got {line.strip()!r}")
            key, value = stripped.split("=", 1)
            key = key.strip().replace("-", "_")
            if key in raw:
                raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
            raw[key] = value.strip()
        return raw

    def clean_config(self, config: Dict[str, object]) -> Dict[str, object]:
        return {key: value for key, value in config.items() if not key.startswith("_") and value is not None}

    def validate_config(self, config: Dict[str, object]) -> Tuple[bool, Optional[str]]:
        if not isinstance(config, dict):
            return False, "Config must be a dictionary"

        unknown = sorted(set(config) - set(_FIELD_TYPES))
        if unknown:
            return False, f"Unknown config keys: {', '.join(unknown)}"

        try:
            values = {key: _coerce(key, value) for key, value in config.items()}
        except (TypeError, ValueError) as exc:
            return False, f"Bad value: {exc}"
        merged = dict(self._load_default_config(), **values)

        checks = [
            (merged["tree_file"] or 2 <= merged["depth"] <= 20, "depth must be in [2, 20]"),
            (merged["tau_max"] >= 1, "tau_max must be >= 1"),
            (merged["lambda_min"] >= 0, "lambda_min must be >= 0"),
            (merged["k"] >= 4, "k must be >= 4"),
            (0 < merged["zeta"] < 0.5, "zeta must be in (0, 1/2)"),
            (merged["delta"] > 0, "delta must be positive"),
            (merged["r"] >= 0, "r must be >= 0"),
            (merged["deep_h"] >= 0, "deep_h must be >= 0"),
            (merged["epsilon"] >= 0, "epsilon must be >= 0"),
            (0 <= merged["resolve_margin"] < 2, "resolve_margin must be in [0, 2)"),
            (merged["mode"] in ("sym", "asym"), "mode must be 'sym' or 'asym'"),
            (merged["trials"] >= 1, "trials must be >= 1"),
            (0 <= merged["seed"] < 2 ** 64, "seed must be a 64-bit unsigned integer"),
            (merged["asym_bound"] >= 0, "asym_bound must be >= 0"),
            (merged["beta"] > 0, "beta must be positive"),
            (merged["slack"] > 0, "slack must be positive"),
            (merged["control_lambda"] > 0, "control_lambda must be positive"),
            (merged["unbias_tolerance"] > 0, "unbias_tolerance must be positive"),
            (0 < merged["deep_success"] <= 1, "deep_success must be in (0, 1]"),
            (merged["pairs_per_trial"] >= 1, "pairs_per_trial must be >= 1"),
            (merged["log_quartet_limit"] >= 0, "log_quartet_limit must be >= 0"),
            (math.isfinite(merged["control_lambda"]), "control_lambda must be finite"),
        ]
        for ok, message in checks:
            if not ok:
                return False, message

        try:
            if any(k < 4 for k in _int_list(merged["k_sweep"])):
                return False, "k_sweep entries must be >= 4"
            heights = _int_list(merged["heights"])
        except ValueError:
            return False, "k_sweep and heights must be comma-separated integers"
        if not heights or any(h < 1 for h in heights):
            return False, "heights must list positive integers"

        try:
            EdgeParams(p_sub=merged["p_sub"], p_del=merged["p_del"], p_ins=merged["p_ins"])
        except ParameterDomainError as exc:
            return False, str(exc)

        return True, None

    def normalize_config(self, config: Dict[str, object]) -> ExperimentConfig:
        values = dict(self._load_default_config())
        values.update({key: _coerce(key, value) for key, value in config.items()})
        return ExperimentConfig(**values)

    def load_config(self, overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
        """File values, then overrides (CLI flags), then validation."""
        raw: Dict[str, object] = {}
        if self.config_path:
            if not os.path.exists(self.config_path):
                raise ConfigError(f"config file not found: {self.config_path}")
            with open(self.config_path, "r", encoding="utf-8") as handle:
                raw.update(self.parse_text(handle.read(), self.config_path))
        raw.update(overrides or {})

        cleaned = self.clean_config(raw)
        is_valid, error = self.validate_config(cleaned)
        if not is_valid:
            raise ConfigError(f"Config validation failed: {error}")
        self.config = cleaned
        return self.normalize_config(cleaned)

    def save_config(self, config: ExperimentConfig, path: Optional[str] = None):
        path = path or self.config_path
        if not path:
            raise ConfigError("no path to save the config to")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(config.canonical_text())
