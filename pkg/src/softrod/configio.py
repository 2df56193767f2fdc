"""INI-style configuration files with sections mirroring the module configs.

Sections and their targets:

* ``[rod]``        -- :class:`softrod.rodmodel.RodParameters` keywords
* ``[integrator]`` -- :class:`softrod.integrator.IntegratorConfig`
* ``[training]``   -- :class:`softrod.surrogate.TrainingConfig`
* ``[ukf]``        -- :class:`softrod.estimator.UkfConfig`
* ``[nempc]``      -- :class:`softrod.controller.NempcConfig`
* ``[experiment]`` -- :class:`softrod.experiments.ExperimentConfig`

Unset keys keep the identified/tuned defaults baked into those classes.
Unknown keys are rejected so typos fail loudly.
"""

import configparser
import dataclasses
import inspect

from .controller import NempcConfig
from .estimator import UkfConfig
from .integrator import IntegratorConfig
from .rodmodel import RodParameters
from .surrogate import TrainingConfig


class ConfigError(ValueError):
    pass


def _defaults_of(target):
    if dataclasses.is_dataclass(target):
        out = {}
        for f in dataclasses.fields(target):
            if f.default is not dataclasses.MISSING:
                out[f.name] = f.default
            elif f.default_factory is not dataclasses.MISSING:  # type: ignore
                out[f.name] = f.default_factory()
        return out
    sig = inspect.signature(target.__init__)
    return {k: p.default for k, p in sig.parameters.items()
            if p.default is not inspect.Parameter.empty}


def _coerce(raw, default, key):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(float(raw))
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(float(p) for p in parts)
    if isinstance(default, str):
        return raw
    if default is None:
        # optional numeric override (e.g. analytic compliance estimates)
        return float(raw)
    raise ConfigError(f"{key}: unsupported option type {type(default)}")


SECTION_TARGETS = {
    "rod": RodParameters,
    "integrator": IntegratorConfig,
    "training": TrainingConfig,
    "ukf": UkfConfig,
    "nempc": NempcConfig,
}


def load_config(path=None, extra_sections=None):
    """Parse a config file into per-section keyword dictionaries.

    Returns ``{section: {key: value}}`` for all known sections (empty dicts
    when the file or section is absent).  ``extra_sections`` maps additional
    section names to their target classes.
    """
    targets = dict(SECTION_TARGETS)
    if extra_sections:
        targets.update(extra_sections)
    out = {name: {} for name in targets}
    if path is None:
        return out
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in cp.sections():
        if section not in targets:
            raise ConfigError(
                f"unknown section [{section}]; known: {sorted(targets)}")
        defaults = _defaults_of(targets[section])
        for key, raw in cp.items(section):
            if key not in defaults:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; "
                    f"known: {sorted(defaults)}")
            out[section][key] = _coerce(raw, defaults[key], f"[{section}] {key}")
    return out
