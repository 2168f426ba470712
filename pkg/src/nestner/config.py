"""Flat ``key = value`` run configuration with presets for the published settings.

Lines starting with ``#`` are comments.  ``preset`` selects the defaults
(cr-lstm, ner-lstm, ner-flair); every other key overrides one setting.
Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, InvalidSpec
from .model import CR_LABELS, NER_LABELS, ModelSpec
from .training import ClassWeightTable, TrainConfig

PRESETS: dict[str, dict[str, str]] = {
    "cr-lstm": {
        "variant": "Base", "max_length": "7", "labels": ",".join(CR_LABELS),
        "embedding_dim": "300", "hidden_dim": "500", "num_layers": "1",
        "lstm_dropout": "0.4", "tagging_dropout": "0.4", "input_dropout": "0.2",
        "epochs": "30", "batch_size": "20000", "learning_rate": "0.001", "class_weights": "cr",
    },
    "ner-lstm": {
        "variant": "Base", "max_length": "6", "labels": ",".join(NER_LABELS),
        "embedding_dim": "300", "hidden_dim": "500", "num_layers": "2",
        "lstm_dropout": "0.4", "tagging_dropout": "0.4", "input_dropout": "0.2",
        "epochs": "140", "batch_size": "20000", "learning_rate": "0.001", "class_weights": "ner",
    },
    "ner-flair": {
        "variant": "NormFlair", "max_length": "6", "labels": ",".join(NER_LABELS),
        "embedding_dim": "300", "hidden_dim": "500", "num_layers": "2",
        "lstm_dropout": "0.4", "tagging_dropout": "0.4", "input_dropout": "0.2",
        "epochs": "140", "batch_size": "10000", "learning_rate": "0.001", "class_weights": "ner-flair",
    },
}

MODEL_KEYS = {f.name for f in fields(ModelSpec)}
TRAIN_KEYS = {"epochs", "batch_size", "batch_unit", "learning_rate", "weight_decay", "beta1", "beta2",
              "adam_eps", "clip_norm", "task_order", "seed", "class_weights", "validate_every"}
PATH_KEYS = {"train_corpus", "dev_corpus", "test_corpus", "corpus_format", "label_map",
             "embedding_file", "context_vectors", "checkpoint", "log", "output_dir", "model_name"}
ALL_KEYS = MODEL_KEYS | TRAIN_KEYS | PATH_KEYS | {"preset"}


@dataclass
class RunConfig:
    model: ModelSpec
    train: TrainConfig
    paths: dict[str, str] = field(default_factory=dict)
    embeddings_auto: bool = True  # trainable_embeddings was left to "auto"

    def path(self, key: str, default: str | None = None) -> str | None:
        value = self.paths.get(key)
        return value if value else default


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in stripped.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        items[key] = value
    return items


def _number(key, raw, kind):
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def _vector_file_dim(path) -> int:
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    return len(line.split()) - 1
    except OSError as exc:
        raise ConfigError(f"cannot read context vectors {path}: {exc}") from None
    raise ConfigError(f"context vector file {path} is empty")


def build_run_config(items: dict[str, str]) -> RunConfig:
    unknown = set(items) - ALL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    preset = items.get("preset", "cr-lstm")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    merged = {**PRESETS[preset], **{k: v for k, v in items.items() if k != "preset"}}

    model_items = {k: v for k, v in merged.items() if k in MODEL_KEYS}
    auto = model_items.get("trainable_embeddings", "auto").strip().lower() == "auto"
    if auto:
        model_items["trainable_embeddings"] = "false" if merged.get("embedding_file") else "true"
    if model_items.get("context_dim", "auto").strip().lower() == "auto":
        ctx = merged.get("context_vectors")
        model_items["context_dim"] = str(_vector_file_dim(ctx)) if ctx else "0"
    try:
        spec = ModelSpec.from_items(model_items)
    except InvalidSpec as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(f"model settings: {exc}") from None

    t = TrainConfig()
    kw = {}
    for key in ("epochs", "batch_size", "seed", "validate_every"):
        if key in merged:
            kw[key] = _number(key, merged[key], int)
    for key in ("learning_rate", "weight_decay", "beta1", "beta2", "adam_eps"):
        if key in merged:
            kw[key] = _number(key, merged[key], float)
    if "clip_norm" in merged:
        raw = merged["clip_norm"].strip().lower()
        kw["clip_norm"] = None if raw in ("", "none", "off", "0") else _number("clip_norm", raw, float)
    for key, allowed in (("batch_unit", ("tokens", "sentences")), ("task_order", ("ascending", "shuffled"))):
        if key in merged:
            if merged[key] not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}")
            kw[key] = merged[key]
    if kw.get("epochs", 0) < 0 or kw.get("batch_size", 1) < 1 or kw.get("validate_every", 1) < 1:
        raise ConfigError("epochs must be >= 0, batch_size and validate_every >= 1")
    cw = merged.get("class_weights", "uniform")
    try:
        kw["class_weights"] = ClassWeightTable.named(cw, spec.max_length, spec.num_classes)
        kw["class_weights"].check_against(spec.max_length, spec.num_classes)
    except ValueError as exc:
        raise ConfigError(f"class_weights: {exc}") from None
    train = replace(t, **kw)
    paths = {k: v for k, v in merged.items() if k in PATH_KEYS}
    return RunConfig(spec, train, paths, auto)


def load_run_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    items = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        items = parse_config_text(text, str(path))
    if overrides:
        items.update(parse_config_text("\n".join(overrides), "--set"))
    return build_run_config(items)
