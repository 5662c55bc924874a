"""Human-editable run configuration files.

Plain ``key = value`` lines with ``#`` comments and a mandatory
``version = 1`` field. CLI flags override file values; the fully resolved
configuration is echoed into every output directory.
"""

from __future__ import annotations

from pathlib import Path

from .exceptions import ConfigError
from .evaluation import DEFAULT_IOU_THRESHOLDS, EvalConfig
from .training import TrainConfig

CONFIG_VERSION = 1

_TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "warmup_steps", "momentum",
               "mode", "lambda_cls", "lambda_reg")
_EVAL_KEYS = ("iou_thresholds", "score_threshold", "nms_threshold",
              "max_detections_per_image", "oracle")
_SWEEP_KEYS = ("preset", "seeds", "heads", "out")

KNOWN_KEYS = ("version",) + _TRAIN_KEYS + _EVAL_KEYS + _SWEEP_KEYS


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    if values.get("version") != str(CONFIG_VERSION):
        raise ConfigError(f"{source}: missing or unsupported version field (need version = {CONFIG_VERSION})")
    return values


def load_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse_config_text(path.read_text(), source=str(path))


def _get(values: dict[str, str], key: str, cast, default):
    if key not in values:
        return default
    try:
        return cast(values[key])
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {values[key]!r} ({exc})") from None


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError("expected true/false")


def _parse_thresholds(text: str) -> tuple[float, ...]:
    """Either a comma list ('0.5,0.75') or a range 'start:step:stop' inclusive."""
    if ":" in text:
        start, step, stop = (float(p) for p in text.split(":"))
        if step <= 0:
            raise ValueError("step must be positive")
        count = int(round((stop - start) / step)) + 1
        return tuple(round(start + i * step, 10) for i in range(count))
    return tuple(float(p) for p in text.split(","))


def _parse_seeds(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def split_head_tokens(text: str) -> tuple[str, ...]:
    # merge tokens may contain commas (merge:r,c); split only on commas that
    # start a new variant kind
    tokens: list[str] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if tokens and part in ("r", "c", "f") and tokens[-1].startswith("merge:"):
            tokens[-1] += "," + part
        else:
            tokens.append(part)
    return tuple(tokens)


def train_config_from(values: dict[str, str], seed: int = 0,
                      overrides: dict | None = None) -> TrainConfig:
    merged = dict(values)
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = str(val)
    return TrainConfig(
        epochs=_get(merged, "epochs", int, 30),
        batch_size=_get(merged, "batch_size", int, 16),
        learning_rate=_get(merged, "learning_rate", float, 0.02),
        warmup_steps=_get(merged, "warmup_steps", int, 100),
        momentum=_get(merged, "momentum", float, 0.9),
        seed=seed,
        mode=_get(merged, "mode", str, "regression_only_gt"),
        lambda_cls=_get(merged, "lambda_cls", float, 1.0),
        lambda_reg=_get(merged, "lambda_reg", float, 1.0),
    )


def eval_config_from(values: dict[str, str], overrides: dict | None = None) -> EvalConfig:
    merged = dict(values)
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = str(val)
    return EvalConfig(
        iou_thresholds=_get(merged, "iou_thresholds", _parse_thresholds, DEFAULT_IOU_THRESHOLDS),
        score_threshold=_get(merged, "score_threshold", float, 0.05),
        nms_threshold=_get(merged, "nms_threshold", float, 0.5),
        max_detections_per_image=_get(merged, "max_detections_per_image", int, 100),
        oracle_gt_class=_get(merged, "oracle", _parse_bool, True),
    )


def sweep_fields_from(values: dict[str, str]) -> dict:
    return {
        "preset": _get(values, "preset", str, "lt60"),
        "seeds": _get(values, "seeds", _parse_seeds, (1, 2, 3)),
        "heads": _get(values, "heads", split_head_tokens, None),
        "out": _get(values, "out", str, None),
    }


def _train_lines(train: TrainConfig) -> list[str]:
    return [
        f"epochs = {train.epochs}",
        f"batch_size = {train.batch_size}",
        f"learning_rate = {train.learning_rate!r}",
        f"warmup_steps = {train.warmup_steps}",
        f"momentum = {train.momentum!r}",
        f"mode = {train.mode}",
        f"lambda_cls = {train.lambda_cls!r}",
        f"lambda_reg = {train.lambda_reg!r}",
    ]


def _eval_lines(eval_cfg: EvalConfig) -> list[str]:
    thresholds = ",".join(repr(t) for t in eval_cfg.iou_thresholds)
    return [
        f"iou_thresholds = {thresholds}",
        f"score_threshold = {eval_cfg.score_threshold!r}",
        f"nms_threshold = {eval_cfg.nms_threshold!r}",
        f"max_detections_per_image = {eval_cfg.max_detections_per_image}",
        f"oracle = {'true' if eval_cfg.oracle_gt_class else 'false'}",
    ]


def render_config(train: TrainConfig, eval_cfg: EvalConfig, preset: str,
                  seeds: tuple[int, ...], heads: tuple[str, ...], out: str) -> str:
    """The fully resolved sweep configuration, parseable by this module."""
    lines = [
        f"version = {CONFIG_VERSION}",
        f"preset = {preset}",
        f"seeds = {','.join(str(s) for s in seeds)}",
        f"heads = {','.join(heads)}",
        f"out = {out}",
    ] + _train_lines(train) + _eval_lines(eval_cfg)
    return "\n".join(lines) + "\n"


def render_train_config(train: TrainConfig) -> str:
    return "\n".join([f"version = {CONFIG_VERSION}"] + _train_lines(train)) + "\n"


def render_eval_config(eval_cfg: EvalConfig) -> str:
    return "\n".join([f"version = {CONFIG_VERSION}"] + _eval_lines(eval_cfg)) + "\n"
