"""
Run settings: schema defaults <- INI file <- command-line overrides.

The schema lives in a2mt_settings.json; every field belongs to one section
and is coerced by its fieldtype.
"""

import configparser
import json
import logging
import os
from functools import lru_cache
from pathlib import Path

from a2mt.environment import CostSchedule
from a2mt.exceptions import ConfigurationError
from a2mt.learner import TrainConfig
from a2mt.masking import MaskSpec
from a2mt.synthgen import SyntheticConfig
from a2mt.utils import _dict

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).with_name("a2mt_settings.json")
SNAPSHOT_NAME = "resolved_config.ini"
OUTPUT_DIR_ENV = "A2MT_OUTPUT_DIR"
TRUE_VALUES = ("1", "true", "yes", "on")
FALSE_VALUES = ("0", "false", "no", "off")


@lru_cache(maxsize=None)
def get_meta():
    """{section: {fieldname: field}} from the schema, in field_order."""
    with open(SCHEMA_PATH, encoding="utf-8") as fh:
        schema = json.load(fh)
    fields = {f["fieldname"]: f for f in schema["fields"]}
    meta = {}
    for fieldname in schema["field_order"]:
        df = fields[fieldname]
        if df["fieldtype"] == "Section Break":
            meta[df["label"]] = {}
            continue
        meta[df["section"]][fieldname] = df
    return meta


def _split(raw):
    return [part.strip() for part in str(raw).replace("\n", ",").split(",") if part.strip()]


def coerce(df, raw):
    fieldtype = df["fieldtype"]
    where = f"{df['section']}.{df['fieldname']}"
    if isinstance(raw, (list, tuple)) and fieldtype in ("Float List", "Int List"):
        raw = ", ".join(str(x) for x in raw)
    try:
        if fieldtype == "Int":
            return int(str(raw).strip())
        if fieldtype == "Float":
            return float(str(raw).strip())
        if fieldtype == "Float List":
            return [float(x) for x in _split(raw)]
        if fieldtype == "Int List":
            return [int(x) for x in _split(raw)]
    except ValueError as e:
        raise ConfigurationError(f"{where}: cannot read {raw!r} as {fieldtype}") from e

    if fieldtype == "Check":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in TRUE_VALUES:
            return True
        if text in FALSE_VALUES:
            return False
        raise ConfigurationError(f"{where}: expected a yes/no value, got {raw!r}")
    if fieldtype == "Select":
        options = df["options"].split("\n")
        if str(raw) not in options:
            raise ConfigurationError(f"{where}: {raw!r} is not one of {options}")
        return str(raw)
    return str(raw)


def format_value(df, value):
    if df["fieldtype"] == "Check":
        return "1" if value else "0"
    if df["fieldtype"] in ("Float List", "Int List"):
        return ", ".join(repr(x) for x in value)
    if df["fieldtype"] == "Float":
        return repr(float(value))
    return str(value)


def defaults():
    return _dict({
        section: _dict({name: coerce(df, df["default"]) for name, df in fields.items()})
        for section, fields in get_meta().items()
    })


def _apply(settings, section, values, source):
    meta = get_meta()
    if section not in meta:
        raise ConfigurationError(f"{source}: unknown section [{section}]")
    for key, raw in values.items():
        if key not in meta[section]:
            raise ConfigurationError(f"{source}: unknown key {key!r} in [{section}]")
        settings[section][key] = coerce(meta[section][key], raw)


def read_ini(path):
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config file {path}: {e}") from e
    return {section: dict(parser.items(section)) for section in parser.sections()}


def load_settings(path=None, overrides=None):
    """
    Resolve settings. `overrides` is {section: {key: value}}; None values are
    ignored so unset command-line flags fall through to the file.
    """
    settings = defaults()
    if path:
        for section, values in read_ini(path).items():
            _apply(settings, section, values, str(path))
    for section, values in (overrides or {}).items():
        _apply(settings, section, {k: v for k, v in values.items() if v is not None}, "override")
    return settings


def write_snapshot(settings, out_dir):
    meta = get_meta()
    parser = configparser.ConfigParser(interpolation=None)
    for section, fields in meta.items():
        parser[section] = {name: format_value(df, settings[section][name]) for name, df in fields.items()}
    path = Path(out_dir) / SNAPSHOT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return path


def output_dir(settings, flag=None):
    """--out wins, then A2MT_OUTPUT_DIR, then [run] output_dir."""
    return Path(flag or os.environ.get(OUTPUT_DIR_ENV) or settings.run.output_dir)


# typed views

def synthetic_config(settings):
    s = settings.synthetic
    return SyntheticConfig(
        length=s.length,
        digit_low=s.digit_low,
        digit_high=s.digit_high,
        counter_low=s.counter_low,
        counter_high=s.counter_high,
        seed=settings.run.seed,
    )


def cost_schedule(settings, M=2):
    costs = settings.costs.cost
    if len(costs) == 1:
        costs = costs * M
    if len(costs) != M:
        raise ConfigurationError(f"[costs] cost needs 1 or {M} values, got {len(costs)}")
    return CostSchedule(c=tuple(costs))


def mask_spec(settings, M=2):
    """MaskSpec from [mask], or the string 'oracle'."""
    m = settings.mask
    if m.keep_prob:
        keep = m.keep_prob * M if len(m.keep_prob) == 1 else m.keep_prob
        drop = None
        if m.drop_prob:
            drop = m.drop_prob * M if len(m.drop_prob) == 1 else m.drop_prob
        return MaskSpec(keep_prob=tuple(keep), use_max_timestep=m.use_max_timestep, drop_prob=drop)
    if m.preset == "oracle":
        return "oracle"
    return MaskSpec.preset(m.preset, M)


def train_config(settings, cost=None):
    t = settings.train
    return TrainConfig(
        mode=t.mode,
        steps=t.steps,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        lr_schedule=t.lr_schedule,
        weight_decay=t.weight_decay,
        tau=t.tau,
        alpha=t.alpha,
        gamma=t.gamma,
        entropy_coef=t.entropy_coef,
        value_coef=t.value_coef,
        costs=cost_schedule(settings) if cost is None else CostSchedule.uniform(cost, 2),
        seed=settings.run.seed,
        deterministic=settings.run.deterministic,
        hidden=tuple(t.hidden),
        grad_clip=t.grad_clip,
        predict_conditioning=t.predict_conditioning,
        intermediate_reward=t.intermediate_reward,
        pretrain_steps=t.pretrain_steps,
        pretrain_masks=settings.mask.preset,
        log_every=t.log_every,
    )
