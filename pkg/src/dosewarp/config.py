"""Strict JSON configuration: solver knobs, loss weights, constraint set.

Missing keys fall back to the built-in defaults; unknown keys and type
mismatches are rejected with the offending JSON path.  An empty file is
treated as the empty document (all defaults).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field as dc_field

from .dose import DoseConstraint, default_constraints
from .losses import LOSS_STRUCTURES, LossWeights
from .register import RegistrationConfig


class ConfigError(ValueError):
    """Configuration rejected; message carries the JSON path."""


@dataclass(frozen=True)
class AppConfig:
    registration: RegistrationConfig = dc_field(default_factory=RegistrationConfig)
    weights: LossWeights = dc_field(default_factory=LossWeights)
    constraints: list = dc_field(default_factory=default_constraints)

    def echo(self) -> dict:
        """Full configuration as plain data, embedded in every report."""
        return {
            "registration": asdict(self.registration),
            "weights": {
                "lambda_smooth": self.weights.lambda_smooth,
                "lambda_cons": self.weights.lambda_cons,
                "structure_weights": dict(self.weights.structure_weights),
                "patch": list(self.weights.patch),
            },
            "constraints": [
                {"id": c.id, "structure": c.structure, "metric": c.metric,
                 "op": c.op, "limit": c.limit}
                for c in self.constraints
            ],
        }


def _type_name(v) -> str:
    return type(v).__name__


def _get_number(obj: dict, key: str, path: str, default, integer=False):
    if key not in obj:
        return default
    v = obj.pop(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number, got {_type_name(v)}")
    if integer:
        if isinstance(v, float) and not v.is_integer():
            raise ConfigError(f"{path}.{key}: expected an integer, got {v}")
        return int(v)
    return float(v)


def _reject_unknown(obj: dict, path: str):
    if obj:
        key = sorted(obj)[0]
        raise ConfigError(f"{path}.{key}: unknown key")


def _parse_registration(obj, path: str) -> RegistrationConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {_type_name(obj)}")
    obj = dict(obj)
    d = RegistrationConfig()
    kwargs = dict(
        n_steps=_get_number(obj, "n_steps", path, d.n_steps, integer=True),
        iters_per_step=_get_number(obj, "iters_per_step", path,
                                   d.iters_per_step, integer=True),
        step_size=_get_number(obj, "step_size", path, d.step_size),
        grad_smoothing_sigma=_get_number(obj, "grad_smoothing_sigma", path,
                                         d.grad_smoothing_sigma),
        pyramid_levels=_get_number(obj, "pyramid_levels", path,
                                   d.pyramid_levels, integer=True),
        converge_tol=_get_number(obj, "converge_tol", path, d.converge_tol),
        seed=_get_number(obj, "seed", path, d.seed, integer=True),
        mask_sigma=_get_number(obj, "mask_sigma", path, d.mask_sigma),
    )
    _reject_unknown(obj, path)
    try:
        return RegistrationConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_weights(obj, path: str) -> LossWeights:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {_type_name(obj)}")
    obj = dict(obj)
    d = LossWeights()
    lam_s = _get_number(obj, "lambda_smooth", path, d.lambda_smooth)
    lam_c = _get_number(obj, "lambda_cons", path, d.lambda_cons)
    sw = dict(d.structure_weights)
    if "structure_weights" in obj:
        raw = obj.pop("structure_weights")
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}.structure_weights: expected an object")
        raw = dict(raw)
        for name in LOSS_STRUCTURES:
            sw[name] = _get_number(raw, name, f"{path}.structure_weights",
                                   sw[name])
        _reject_unknown(raw, f"{path}.structure_weights")
    patch = tuple(d.patch)
    if "patch" in obj:
        raw = obj.pop("patch")
        if (not isinstance(raw, list) or len(raw) != 3
                or any(isinstance(p, bool) or not isinstance(p, int) for p in raw)):
            raise ConfigError(f"{path}.patch: expected a list of 3 integers")
        patch = tuple(raw)
    _reject_unknown(obj, path)
    try:
        return LossWeights(lambda_smooth=lam_s, lambda_cons=lam_c,
                           structure_weights=sw, patch=patch)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_constraint(obj, path: str) -> DoseConstraint:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {_type_name(obj)}")
    obj = dict(obj)
    try:
        cid = obj.pop("id")
        structure = obj.pop("structure")
        metric = obj.pop("metric")
    except KeyError as exc:
        raise ConfigError(f"{path}: missing required key {exc.args[0]!r}") from exc
    for key, v in (("id", cid), ("structure", structure), ("metric", metric)):
        if not isinstance(v, str):
            raise ConfigError(f"{path}.{key}: expected a string")
    op = obj.pop("op", ">=")
    if not isinstance(op, str):
        raise ConfigError(f"{path}.op: expected a string")
    limit = None
    if "limit" in obj:
        raw = obj.pop("limit")
        if raw is not None:
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                raise ConfigError(f"{path}.limit: expected a number or null")
            limit = float(raw)
    _reject_unknown(obj, path)
    try:
        return DoseConstraint(cid, structure, metric, op, limit)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(document) -> AppConfig:
    """Validate a parsed JSON document into an AppConfig."""
    if not isinstance(document, dict):
        raise ConfigError(f"$: expected an object, got {_type_name(document)}")
    document = dict(document)
    registration = RegistrationConfig()
    weights = LossWeights()
    constraints = default_constraints()
    if "registration" in document:
        registration = _parse_registration(document.pop("registration"),
                                           "$.registration")
    if "weights" in document:
        weights = _parse_weights(document.pop("weights"), "$.weights")
    if "constraints" in document:
        raw = document.pop("constraints")
        if not isinstance(raw, list):
            raise ConfigError("$.constraints: expected a list")
        constraints = [_parse_constraint(c, f"$.constraints[{i}]")
                       for i, c in enumerate(raw)]
    _reject_unknown(document, "$")
    return AppConfig(registration, weights, constraints)


def load_config(path: str | None) -> AppConfig:
    """Load configuration from a JSON file; None or empty file -> defaults."""
    import json

    if path is None:
        return AppConfig()
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        return AppConfig()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(document)
