"""Plain ``key = value`` config files covering model, optimizer, and
dataset settings.  Unknown keys, malformed values, and invariant
violations are all reported together as a ConfigError (schema in
docs/formats.md)."""

from __future__ import annotations

from dataclasses import asdict

from .errors import ConfigError
from .model import ParserConfig
from .train import DataConfig, SgdConfig


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_opt_int(text: str):
    return None if text.strip().lower() == "none" else int(text)


_MODEL_KEYS = {
    "d": int, "layers": int, "labels": int, "background": int,
    "superpixel_k": int, "compactness": float, "slic_iters": int,
    "scheduler": str, "forget": str, "residual": _parse_bool,
    "per_pixel_head": _parse_bool, "cds_label": _parse_opt_int,
    "neighbor_gate_uses_new": _parse_bool,
}
_SGD_KEYS = {
    "lr_new": float, "lr_pretrained": float, "momentum": float,
    "weight_decay": float, "batch_size": int, "epochs_a": int,
    "epochs_b": int,
}
_DATA_KEYS = {
    "train_n": int, "val_n": int, "image_size": int, "parts": int,
    "noise_sigma": float,
}


def parse_config_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    problems: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected key = value")
            continue
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        raw[key] = value
    if problems:
        raise ConfigError(problems)
    return raw


def build_configs(raw: dict[str, str]) \
        -> tuple[ParserConfig, SgdConfig, DataConfig]:
    problems: list[str] = []
    parser_kw, sgd_kw, data_kw = {}, {}, {}
    for key, value in raw.items():
        for keys, kw in ((_MODEL_KEYS, parser_kw), (_SGD_KEYS, sgd_kw),
                         (_DATA_KEYS, data_kw)):
            if key in keys:
                try:
                    kw[key] = keys[key](value)
                except ValueError as exc:
                    problems.append(f"{key}: {exc}")
                break
        else:
            problems.append(f"unknown key {key!r}")
    if problems:
        raise ConfigError(problems)

    cfg = ParserConfig(**parser_kw)
    sgd = SgdConfig(**sgd_kw)
    data = DataConfig(**data_kw)
    try:
        cfg.validate()
        sgd.validate()
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    if data.parts + 1 > cfg.labels:
        raise ConfigError([f"parts={data.parts} needs at least "
                           f"{data.parts + 1} labels, got {cfg.labels}"])
    return cfg, sgd, data


def load_configs(path: str) -> tuple[ParserConfig, SgdConfig, DataConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        return build_configs(parse_config_text(fh.read()))


def dump_configs(cfg: ParserConfig, sgd: SgdConfig, data: DataConfig) -> str:
    lines = []
    for obj in (cfg, sgd, data):
        for key, value in asdict(obj).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
