"""Command-line entry points: dataset generation, training, adaptation,
evaluation, ablation grids, and report rendering.

Runs are driven by one YAML config file with these sections (all optional
unless a command needs them):

    seed: 7                # mandatory, every random stream derives from it
    output_dir: runs/demo  # where artifacts land

    data:
      train: data/train.csv        # interaction files
      test: data/test.csv
      latents: data/latents.csv    # pretrained feature vectors, or:
      user_attrs: data/users.csv   # categorical attributes (both needed)
      item_attrs: data/items.csv
      min_interactions: 13         # task admission threshold
      support_size: 10
      negative_strategy: none      # none | n0 | n1 | n2
      negative_ratio: 1.0

    model:
      kind: mesh                   # mesh | mesh_i | wide_deep | baseline
      hidden_dims: [32]
      embedding_dim: 16            # categorical encoders only
      sigmoid_output: auto         # auto | true | false
      margin: 1.0                  # baseline only
      negative_weight: 1.0         # baseline only

    train:
      trainer: meta                # meta | fmst | nonmeta | one_shop | baseline
      alpha: 0.01                  # local / plain-SGD rate
      beta: 0.1                    # global meta rate
      local_steps: 2
      gamma: 0.0                   # fair-training weight (fmst)
      regularizer: option1         # option1 | option2
      shop_batch_size: 8
      query_batch_size: null
      steps: 100                   # meta trainers
      epochs: 5                    # pooled / one-shop / baseline trainers
      batch_size: null
      loss: auto                   # auto | squared | bce
      outer_optimizer: sgd         # sgd | adam
      task_unit: shop              # shop | item | user
      early_stop_patience: null
      shop_id: null                # one_shop trainer target

    eval:
      checkpoint: runs/demo/checkpoint.json
      adapt: false                 # adapt per shop before scoring
      recall_ks: [0.1]
      ndcg_ks: [3]
      recall_mode: standard        # standard | topk_fraction
      include_mae: true
      thresholds: [0.5, 0.6, 0.7, 0.8]
      rating_positive_threshold: 4.0
      candidate_pool: all_users    # all_users | observed
      query_mode: null             # null (infer) | item | user_shop

    synthetic:                     # gen-data knobs, see SyntheticSpec
      n_users: 400
      ...

    ablation:
      study: debias_gamma          # one_shop | negative_sampling |
      n_shops: 6                   #   debias_gamma | task_unit
      gammas: [0.0, 0.01, 0.8]

    adapt:
      checkpoint: runs/demo/checkpoint.json
      support: data/support.csv
      shops: null                  # default: every shop in the support file

`--set section.key=value` overrides file values (values parsed as YAML, so
`--set train.steps=50` and `--set eval.recall_ks=[1,3]` both work); flags
beat the file. Unknown keys fail validation before anything is written.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import numcore
from .checkpoint import atomic_write_text, load_checkpoint, save_checkpoint
from .datapipe import (
    AttributeTable,
    FeatureTable,
    InteractionRecord,
    NegativeStrategy,
    ShopStats,
    ShopTask,
    SyntheticSpec,
    TaskUnit,
    attach_size_classes,
    attribute_fields,
    build_tasks,
    classify_shops,
    convert_ml1m,
    generate_synthetic,
    load_attributes,
    load_interactions,
    load_latents,
    negative_sample,
    save_interactions,
    save_latents,
    stable_hash64,
)
from .errors import ConfigError, DataError, MetaShopError, NumericError, ShapeError
from .evaluation import (
    CandidatePool,
    EvalOptions,
    QueryMode,
    evaluate_tasks,
)
from .metaopt import (
    MetaConfig,
    OuterOptimizer,
    RegularizerKind,
    config_manifest_entries,
    local_adapt,
    meta_inference,
    meta_train,
    nonmeta_train,
    one_shop_train,
    train_baseline,
    write_manifest,
)
from .metrics import RecallMode, load_report, report_tables, save_report
from .models import (
    BaselineModel,
    ModelKind,
    RecModel,
    build_baseline,
    build_categorical_encoder,
    build_model,
    pretrained_encoder,
)

_TAG_MODEL_INIT = 5
_TAG_ONE_SHOP_INIT = 7
_TAG_ABLATION = 37


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------


@dataclass
class DataConfig:
    train: str | None = None
    test: str | None = None
    latents: str | None = None
    user_attrs: str | None = None
    item_attrs: str | None = None
    min_interactions: int = 13
    support_size: int = 10
    negative_strategy: str = "none"
    negative_ratio: float = 1.0


@dataclass
class ModelConfig:
    kind: str = "mesh"
    hidden_dims: list[int] = field(default_factory=lambda: [32])
    embedding_dim: int = 16
    sigmoid_output: Any = "auto"
    margin: float = 1.0
    negative_weight: float = 1.0


@dataclass
class TrainConfig:
    trainer: str = "meta"
    alpha: float = 0.01
    beta: float = 0.1
    local_steps: int = 2
    gamma: float = 0.0
    regularizer: str = "option1"
    shop_batch_size: int = 8
    query_batch_size: int | None = None
    steps: int = 100
    epochs: int = 5
    batch_size: int | None = None
    loss: str = "auto"
    outer_optimizer: str = "sgd"
    task_unit: str = "shop"
    early_stop_patience: int | None = None
    shop_id: str | None = None


@dataclass
class EvalConfig:
    checkpoint: str | None = None
    adapt: bool = False
    recall_ks: list[float] = field(default_factory=lambda: [0.1])
    ndcg_ks: list[int] = field(default_factory=lambda: [3])
    recall_mode: str = "standard"
    include_mae: bool = True
    thresholds: list[float] = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8])
    rating_positive_threshold: float = 4.0
    candidate_pool: str = "all_users"
    query_mode: str | None = None


@dataclass
class AblationConfig:
    study: str | None = None
    n_shops: int = 6
    gammas: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.8])


@dataclass
class AdaptConfig:
    checkpoint: str | None = None
    support: str | None = None
    shops: list[str] | None = None


@dataclass
class RunConfig:
    seed: int
    output_dir: str | None
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    synthetic: dict[str, Any]
    ablation: AblationConfig
    adapt: AdaptConfig


_SECTIONS = ("data", "model", "train", "eval", "synthetic", "ablation", "adapt")


def _type_name(v: Any) -> str:
    return type(v).__name__


def _check_int(path: str, v: Any) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path} must be an integer, got {_type_name(v)}")
    return v


def _check_float(path: str, v: Any) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path} must be a number, got {_type_name(v)}")
    return float(v)


def _check_bool(path: str, v: Any) -> bool:
    if not isinstance(v, bool):
        raise ConfigError(f"{path} must be true or false, got {v!r}")
    return v


def _check_str(path: str, v: Any) -> str:
    if not isinstance(v, str) or not v:
        raise ConfigError(f"{path} must be a non-empty string, got {v!r}")
    return v


def _check_opt_int(path: str, v: Any) -> int | None:
    return None if v is None else _check_int(path, v)


def _check_opt_str(path: str, v: Any) -> str | None:
    return None if v is None else _check_str(path, v)


def _check_number_list(path: str, v: Any) -> list[float]:
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"{path} must be a non-empty list of numbers")
    return [_check_float(f"{path}[{i}]", x) for i, x in enumerate(v)]


def _check_int_list(path: str, v: Any) -> list[int]:
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"{path} must be a list of integers")
    return [_check_int(f"{path}[{i}]", x) for i, x in enumerate(v)]


def _check_choice(path: str, v: Any, choices: Sequence[str]) -> str:
    s = _check_str(path, v)
    if s not in choices:
        raise ConfigError(f"{path} must be one of {', '.join(choices)}; got {s!r}")
    return s


def _apply_section(target: Any, raw: Mapping, name: str, casters: Mapping) -> None:
    for key, value in raw.items():
        if key not in casters:
            raise ConfigError(f"unknown config key {name}.{key}")
        setattr(target, key, casters[key](f"{name}.{key}", value))


def parse_config(raw: Mapping[str, Any]) -> RunConfig:
    """Validate the raw config mapping into a RunConfig (fail fast)."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config file must hold a mapping at the top level")
    unknown = set(raw) - set(_SECTIONS) - {"seed", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]}")
    if "seed" not in raw:
        raise ConfigError("config needs a top-level seed")
    seed = _check_int("seed", raw["seed"])
    output_dir = _check_opt_str("output_dir", raw.get("output_dir"))
    for section in _SECTIONS:
        if section in raw and not isinstance(raw[section], Mapping):
            raise ConfigError(f"config section {section} must be a mapping")

    data = DataConfig()
    _apply_section(
        data, raw.get("data", {}), "data",
        {
            "train": _check_opt_str,
            "test": _check_opt_str,
            "latents": _check_opt_str,
            "user_attrs": _check_opt_str,
            "item_attrs": _check_opt_str,
            "min_interactions": _check_int,
            "support_size": _check_int,
            "negative_strategy": lambda p, v: _check_choice(
                p, "none" if v is None else v, ("none", "n0", "n1", "n2")
            ),
            "negative_ratio": _check_float,
        },
    )

    model = ModelConfig()
    _apply_section(
        model, raw.get("model", {}), "model",
        {
            "kind": lambda p, v: _check_choice(
                p, v, ("mesh", "mesh_i", "wide_deep", "baseline")
            ),
            "hidden_dims": lambda p, v: _check_int_list(p, v),
            "embedding_dim": _check_int,
            "sigmoid_output": lambda p, v: (
                v if v == "auto" else _check_bool(p, v)
            ),
            "margin": _check_float,
            "negative_weight": _check_float,
        },
    )
    if not model.hidden_dims or any(d < 1 for d in model.hidden_dims):
        raise ConfigError("model.hidden_dims must be positive integers")

    train = TrainConfig()
    _apply_section(
        train, raw.get("train", {}), "train",
        {
            "trainer": lambda p, v: _check_choice(
                p, v, ("meta", "fmst", "nonmeta", "one_shop", "baseline")
            ),
            "alpha": _check_float,
            "beta": _check_float,
            "local_steps": _check_int,
            "gamma": _check_float,
            "regularizer": lambda p, v: _check_choice(p, v, ("option1", "option2")),
            "shop_batch_size": _check_int,
            "query_batch_size": _check_opt_int,
            "steps": _check_int,
            "epochs": _check_int,
            "batch_size": _check_opt_int,
            "loss": lambda p, v: _check_choice(p, v, ("auto", "squared", "bce")),
            "outer_optimizer": lambda p, v: _check_choice(p, v, ("sgd", "adam")),
            "task_unit": lambda p, v: _check_choice(p, v, ("shop", "item", "user")),
            "early_stop_patience": _check_opt_int,
            "shop_id": _check_opt_str,
        },
    )

    eval_cfg = EvalConfig()
    _apply_section(
        eval_cfg, raw.get("eval", {}), "eval",
        {
            "checkpoint": _check_opt_str,
            "adapt": _check_bool,
            "recall_ks": _check_number_list,
            "ndcg_ks": _check_int_list,
            "recall_mode": lambda p, v: _check_choice(
                p, v, ("standard", "topk_fraction")
            ),
            "include_mae": _check_bool,
            "thresholds": _check_number_list,
            "rating_positive_threshold": _check_float,
            "candidate_pool": lambda p, v: _check_choice(
                p, v, ("all_users", "observed")
            ),
            "query_mode": lambda p, v: (
                None if v is None else _check_choice(p, v, ("item", "user_shop"))
            ),
        },
    )

    synth_raw = dict(raw.get("synthetic", {}))
    synth_fields = {f.name for f in SyntheticSpec.__dataclass_fields__.values()}
    for key in synth_raw:
        if key not in synth_fields:
            raise ConfigError(f"unknown config key synthetic.{key}")

    ablation = AblationConfig()
    _apply_section(
        ablation, raw.get("ablation", {}), "ablation",
        {
            "study": lambda p, v: _check_choice(
                p, v, ("one_shop", "negative_sampling", "debias_gamma", "task_unit")
            ),
            "n_shops": _check_int,
            "gammas": _check_number_list,
        },
    )

    adapt = AdaptConfig()
    _apply_section(
        adapt, raw.get("adapt", {}), "adapt",
        {
            "checkpoint": _check_opt_str,
            "support": _check_opt_str,
            "shops": lambda p, v: (
                None
                if v is None
                else [_check_str(f"{p}[{i}]", s) for i, s in enumerate(v)]
                if isinstance(v, (list, tuple))
                else _raise_config(f"{p} must be a list of shop ids")
            ),
        },
    )

    return RunConfig(
        seed, output_dir, data, model, train, eval_cfg, synth_raw, ablation, adapt
    )


def _raise_config(msg: str):
    raise ConfigError(msg)


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> RunConfig:
    """Read the YAML config, apply --set overrides, and validate."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, _, text_value = item.partition("=")
        keys = [k for k in dotted.split(".") if k]
        if not keys:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = yaml.safe_load(text_value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set {dotted}: bad value {text_value!r}") from exc
        node = raw
        for k in keys[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"--set {dotted}: {k} is not a section")
            node = nxt
        node[keys[-1]] = value
    return parse_config(raw)


def _require(value: Any, what: str) -> Any:
    if value is None:
        raise ConfigError(f"this command needs {what}")
    return value


def _require_path(value: str | None, what: str) -> Path:
    path = Path(_require(value, what))
    if not path.exists():
        raise ConfigError(f"{what} {path} does not exist")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    return Path(_require(cfg.output_dir, "output_dir"))


# ---------------------------------------------------------------------------
# assembly helpers
# ---------------------------------------------------------------------------


def _feature_source(cfg: RunConfig):
    """Load the configured feature source; returns (source, mode)."""
    data = cfg.data
    if data.latents is not None:
        table, _ = load_latents(_require_path(data.latents, "data.latents"))
        return table, "pretrained"
    if data.user_attrs is not None or data.item_attrs is not None:
        if data.user_attrs is None or data.item_attrs is None:
            raise ConfigError(
                "categorical features need both data.user_attrs and data.item_attrs"
            )
        users = load_attributes(_require_path(data.user_attrs, "data.user_attrs"))
        items = load_attributes(_require_path(data.item_attrs, "data.item_attrs"))
        return AttributeTable(users, items), "categorical"
    raise ConfigError(
        "no feature source: set data.latents, or data.user_attrs plus data.item_attrs"
    )


def _labels_are_binary(records: Sequence[InteractionRecord]) -> bool:
    return all(r.label in (0.0, 1.0) for r in records)


def _resolve_sigmoid(cfg: RunConfig, binary: bool) -> bool:
    s = cfg.model.sigmoid_output
    if s == "auto":
        return binary
    return bool(s)


def _resolve_loss(cfg: RunConfig) -> numcore.LossKind:
    if cfg.train.loss == "auto":
        return numcore.LossKind.SQUARED
    return numcore.LossKind(cfg.train.loss)


def _meta_config(cfg: RunConfig, loss: numcore.LossKind) -> MetaConfig:
    t = cfg.train
    return MetaConfig(
        alpha=t.alpha,
        beta=t.beta,
        local_steps=t.local_steps,
        gamma=t.gamma,
        regularizer=RegularizerKind(t.regularizer),
        shop_batch_size=t.shop_batch_size,
        support_size=cfg.data.support_size,
        query_batch_size=t.query_batch_size,
        loss_kind=loss,
        model_kind=ModelKind(cfg.model.kind),
        task_unit=TaskUnit(t.task_unit),
        outer_optimizer=OuterOptimizer(t.outer_optimizer),
        seed=cfg.seed,
    )


def _build_fresh_model(cfg: RunConfig, features, mode: str, sigmoid: bool, seed_tag):
    """Initialise the configured model against the feature source."""
    rng = np.random.default_rng(seed_tag)
    kind = ModelKind(cfg.model.kind)
    if mode == "pretrained":
        user_dim = len(next(iter(features.users.values()))) if features.users else 0
        item_dim = len(next(iter(features.items.values())))
        user_enc = pretrained_encoder(user_dim)
        item_enc = pretrained_encoder(item_dim)
    else:
        user_enc = build_categorical_encoder(
            attribute_fields(features.users), cfg.model.embedding_dim, rng
        )
        item_enc = build_categorical_encoder(
            attribute_fields(features.items), cfg.model.embedding_dim, rng
        )
    try:
        if kind is ModelKind.BASELINE:
            return build_baseline(
                item_enc,
                cfg.model.hidden_dims,
                rng,
                margin=cfg.model.margin,
                negative_weight=cfg.model.negative_weight,
            )
        return build_model(
            kind, user_enc, item_enc, cfg.model.hidden_dims, rng, sigmoid
        )
    except ShapeError as exc:
        raise ConfigError(f"model does not fit the features: {exc}") from exc


def _augmented_records(
    cfg: RunConfig,
    records: list[InteractionRecord],
    stats: ShopStats,
) -> list[InteractionRecord]:
    """Append sampled negatives when data.negative_strategy asks for them."""
    if cfg.data.negative_strategy == "none":
        return records
    strategy = NegativeStrategy(cfg.data.negative_strategy)
    positives = [r for r in records if r.label > 0]
    negatives = negative_sample(
        positives, strategy, stats, ratio=cfg.data.negative_ratio, seed=cfg.seed
    )
    return records + negatives


def _train_histories(records: Sequence[InteractionRecord]) -> dict[str, list[str]]:
    hist: dict[str, set[str]] = {}
    for r in records:
        if r.label > 0:
            hist.setdefault(r.user_id, set()).add(r.item_id)
    return {u: sorted(items) for u, items in hist.items()}


def _eval_options(cfg: RunConfig) -> EvalOptions:
    e = cfg.eval
    return EvalOptions(
        recall_ks=tuple(e.recall_ks),
        ndcg_ks=tuple(e.ndcg_ks),
        include_mae=e.include_mae,
        recall_mode=RecallMode(e.recall_mode),
        thresholds=tuple(e.thresholds),
        rating_positive_threshold=e.rating_positive_threshold,
        candidate_pool=CandidatePool(e.candidate_pool),
        query_mode=None if e.query_mode is None else QueryMode(e.query_mode),
    )


def _loss_entries(losses: Sequence[float]) -> list[tuple[str, Any]]:
    return [(f"loss.{i:04d}", repr(v)) for i, v in enumerate(losses)]


def _headline(report) -> str:
    parts = []
    for name in sorted(report.metrics):
        s = report.metrics[name]
        if s.shop_mean is not None:
            parts.append(f"{name} shop_mean={s.shop_mean:.4f}")
    return ", ".join(parts) if parts else "no defined metrics"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    started = time.monotonic()
    out = _out_dir(cfg)
    spec_args = dict(cfg.synthetic)
    spec_args.setdefault("seed", cfg.seed)
    spec = SyntheticSpec(**spec_args)
    data = generate_synthetic(spec)
    save_interactions(out / "train.csv", data.train)
    save_interactions(out / "test.csv", data.test)
    save_latents(
        out / "latents.csv", data.features.users, data.features.items,
        data.shop_effects,
    )
    sizes: dict[str, int] = {}
    for r in data.train + data.test:
        sizes[r.shop_id] = sizes.get(r.shop_id, 0) + 1
    entries = [("command", "gen-data"), ("seed", cfg.seed)]
    entries += config_manifest_entries(spec, "synthetic")
    entries += [
        ("train_records", len(data.train)),
        ("test_records", len(data.test)),
        ("new_shops", ",".join(data.new_shops)),
    ]
    entries += [(f"shop_size.{s}", sizes[s]) for s in sorted(sizes)]
    entries.append(("wall_time_seconds", f"{time.monotonic() - started:.3f}"))
    write_manifest(out / "gen-data.manifest", entries)
    print(
        f"wrote {len(data.train)} train and {len(data.test)} test records "
        f"for {spec.n_shops} shops ({len(data.new_shops)} held out as new) "
        f"to {out}"
    )
    return 0


def _load_train_records(cfg: RunConfig) -> list[InteractionRecord]:
    return load_interactions(_require_path(cfg.data.train, "data.train"))


def _load_test_records(cfg: RunConfig) -> list[InteractionRecord]:
    return load_interactions(_require_path(cfg.data.test, "data.test"))


def _run_trainer(
    cfg: RunConfig,
    trainer: str,
    model,
    records: list[InteractionRecord],
    features,
    meta_cfg: MetaConfig,
    stats: ShopStats,
):
    """Dispatch one training run; returns (model, history)."""
    t = cfg.train
    if trainer in ("meta", "fmst"):
        if isinstance(model, BaselineModel):
            raise ConfigError("the baseline model trains with trainer=baseline")
        tasks = build_tasks(
            records,
            min_interactions=cfg.data.min_interactions,
            support_size=cfg.data.support_size,
            seed=cfg.seed,
            task_unit=meta_cfg.task_unit,
        )
        if not tasks:
            raise DataError(
                "no task reaches data.min_interactions; lower it or add data"
            )
        if trainer == "fmst" and meta_cfg.gamma != 0.0:
            if meta_cfg.task_unit is not TaskUnit.SHOP:
                raise ConfigError(
                    "fair training sizes tasks by shop sales; use task_unit=shop"
                )
            tasks = attach_size_classes(tasks, stats, use_taxonomy=False)
        return meta_train(
            model, tasks, features, meta_cfg, t.steps,
            regularized=(trainer == "fmst"),
            early_stop_patience=t.early_stop_patience,
        )
    if trainer == "nonmeta":
        if isinstance(model, BaselineModel):
            raise ConfigError("the baseline model trains with trainer=baseline")
        return nonmeta_train(
            model, records, features, meta_cfg, t.epochs, t.batch_size
        )
    if trainer == "one_shop":
        shop = _require(t.shop_id, "train.shop_id (the shop to train on)")
        subset = [r for r in records if r.shop_id == shop]
        if not subset:
            raise DataError(f"no training records for shop {shop!r}")
        return one_shop_train(model, subset, features, meta_cfg, t.epochs, t.batch_size)
    if trainer == "baseline":
        if not isinstance(model, BaselineModel):
            raise ConfigError("trainer=baseline needs model.kind=baseline")
        return train_baseline(
            model, records, features, meta_cfg, t.epochs,
            t.batch_size if t.batch_size else 64,
        )
    raise ConfigError(f"unknown trainer {trainer!r}")


def cmd_train(cfg: RunConfig) -> int:
    started = time.monotonic()
    out = _out_dir(cfg)
    trainer = cfg.train.trainer
    if (trainer == "baseline") != (cfg.model.kind == "baseline"):
        raise ConfigError("trainer=baseline and model.kind=baseline go together")
    records = _load_train_records(cfg)
    features, feature_mode = _feature_source(cfg)
    binary = _labels_are_binary(records)
    sigmoid = _resolve_sigmoid(cfg, binary)
    loss = _resolve_loss(cfg)
    meta_cfg = _meta_config(cfg, loss)
    stats = classify_shops(records, [])
    records = _augmented_records(cfg, records, stats)
    model = _build_fresh_model(
        cfg, features, feature_mode, sigmoid, [cfg.seed, _TAG_MODEL_INIT]
    )
    model, history = _run_trainer(
        cfg, trainer, model, records, features, meta_cfg, stats
    )
    ckpt = out / "checkpoint.json"
    save_checkpoint(
        ckpt, model,
        {"trainer": trainer, "model_kind": cfg.model.kind, "seed": str(cfg.seed)},
    )
    entries = [("command", "train"), ("trainer", trainer)]
    entries += config_manifest_entries(meta_cfg)
    entries += [
        ("train_records", len(records)),
        ("steps_run", len(history.losses)),
        ("stopped_early", str(history.stopped_early).lower()),
    ]
    entries += _loss_entries(history.losses)
    entries.append(("wall_time_seconds", f"{time.monotonic() - started:.3f}"))
    write_manifest(out / "train.manifest", entries)
    last = f"{history.losses[-1]:.6f}" if history.losses else "n/a"
    print(
        f"{trainer} training ran {len(history.losses)} steps "
        f"(final loss {last}); checkpoint at {ckpt}"
    )
    return 0


def cmd_adapt(cfg: RunConfig) -> int:
    started = time.monotonic()
    out = _out_dir(cfg)
    ckpt_path = _require_path(cfg.adapt.checkpoint, "adapt.checkpoint")
    support_path = _require_path(cfg.adapt.support, "adapt.support")
    model, meta = load_checkpoint(ckpt_path)
    if not isinstance(model, RecModel):
        raise ConfigError("only the shared recommendation models can adapt")
    features, _ = _feature_source(cfg)
    records = load_interactions(support_path)
    groups: dict[str, list[InteractionRecord]] = {}
    for r in records:
        groups.setdefault(r.shop_id, []).append(r)
    shops = cfg.adapt.shops or sorted(groups)
    meta_cfg = _meta_config(cfg, _resolve_loss(cfg))
    adapted_dir = out / "adapted"
    written = []
    for shop in shops:
        if shop not in groups or not groups[shop]:
            raise DataError(f"no support records for shop {shop!r}")
        adapted = local_adapt(model, groups[shop], features, meta_cfg)
        path = adapted_dir / f"{shop}.json"
        save_checkpoint(path, adapted, meta)
        written.append(path)
    entries = [("command", "adapt"), ("checkpoint", str(ckpt_path))]
    entries += config_manifest_entries(meta_cfg)
    entries += [("shops", ",".join(shops)), ("files", len(written))]
    entries.append(("wall_time_seconds", f"{time.monotonic() - started:.3f}"))
    write_manifest(out / "adapt.manifest", entries)
    print(f"adapted {len(written)} shops into {adapted_dir}")
    return 0


def _evaluation_pieces(cfg: RunConfig):
    """Everything evaluate/ablation share: records, stats, tasks, options."""
    train_records = _load_train_records(cfg)
    test_records = _load_test_records(cfg)
    features, feature_mode = _feature_source(cfg)
    stats = classify_shops(train_records, test_records)
    tasks = build_tasks(
        test_records,
        min_interactions=cfg.data.min_interactions,
        support_size=cfg.data.support_size,
        seed=cfg.seed,
    )
    if not tasks:
        raise DataError("no evaluation task reaches data.min_interactions")
    tasks = attach_size_classes(tasks, stats, use_taxonomy=True)
    pool = sorted(
        {r.user_id for r in train_records} | {r.user_id for r in test_records}
    )
    return train_records, test_records, features, feature_mode, stats, tasks, pool


def _evaluate_model(cfg, model, tasks, features, stats, pool, histories):
    options = _eval_options(cfg)
    models: Any = model
    if cfg.eval.adapt and isinstance(model, RecModel):
        meta_cfg = _meta_config(cfg, _resolve_loss(cfg))
        models = meta_inference(model, tasks, features, meta_cfg)
    return evaluate_tasks(
        models,
        tasks,
        features,
        options,
        shop_classes=stats.taxonomy,
        user_pool=pool,
        baseline_histories=histories if isinstance(model, BaselineModel) else None,
    )


def cmd_evaluate(cfg: RunConfig) -> int:
    started = time.monotonic()
    out = _out_dir(cfg)
    ckpt_path = _require_path(cfg.eval.checkpoint, "eval.checkpoint")
    model, _ = load_checkpoint(ckpt_path)
    train_records, _, features, _, stats, tasks, pool = _evaluation_pieces(cfg)
    histories = _train_histories(train_records)
    report = _evaluate_model(cfg, model, tasks, features, stats, pool, histories)
    save_report(out / "report.json", report)
    atomic_write_text(out / "tables.txt", report_tables(report))
    entries = [("command", "evaluate"), ("checkpoint", str(ckpt_path))]
    entries += config_manifest_entries(_eval_options(cfg), "eval")
    entries += [("adapt", str(cfg.eval.adapt).lower())]
    entries += [(f"count.{k}", v) for k, v in sorted(report.counts.items())]
    entries.append(("wall_time_seconds", f"{time.monotonic() - started:.3f}"))
    write_manifest(out / "evaluate.manifest", entries)
    print(f"evaluated {report.counts['queries']} queries: {_headline(report)}")
    print(f"report at {out / 'report.json'}; tables at {out / 'tables.txt'}")
    return 0


def cmd_report(report_path: str, out_path: str | None) -> int:
    report = load_report(report_path)
    text = report_tables(report)
    if out_path:
        atomic_write_text(out_path, text)
        print(f"tables written to {out_path}")
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------


def _grid_metrics(report) -> dict[str, tuple[float | None, float | None]]:
    return {
        name: (s.shop_mean, s.shop_variance)
        for name, s in sorted(report.metrics.items())
    }


def _write_grid(out: Path, study: str, rows: list[tuple[str, dict]]) -> None:
    names = sorted({n for _, metrics in rows for n in metrics})
    header = ["setting"]
    for n in names:
        header += [f"{n}.shop_mean", f"{n}.shop_variance"]
    lines = ["\t".join(header)]
    for label, metrics in rows:
        cells = [label]
        for n in names:
            mean, var = metrics.get(n, (None, None))
            cells.append("" if mean is None else f"{mean:.6f}")
            cells.append("" if var is None else f"{var:.6f}")
        lines.append("\t".join(cells))
    atomic_write_text(out / f"ablation_{study}.tsv", "\n".join(lines) + "\n")


def cmd_ablation(cfg: RunConfig) -> int:
    started = time.monotonic()
    out = _out_dir(cfg)
    study = _require(cfg.ablation.study, "ablation.study")
    train_records, _, features, feature_mode, stats, tasks, pool = (
        _evaluation_pieces(cfg)
    )
    histories = _train_histories(train_records)
    binary = _labels_are_binary(train_records)
    sigmoid = _resolve_sigmoid(cfg, binary)
    loss = _resolve_loss(cfg)
    rows: list[tuple[str, dict]] = []

    def fresh_model():
        return _build_fresh_model(
            cfg, features, feature_mode, sigmoid, [cfg.seed, _TAG_MODEL_INIT]
        )

    def evaluate(models):
        report = evaluate_tasks(
            models, tasks, features, _eval_options(cfg),
            shop_classes=stats.taxonomy, user_pool=pool,
            baseline_histories=histories,
        )
        return report, _grid_metrics(report)

    def train_meta(meta_cfg: MetaConfig, regularized: bool, records):
        train_tasks = build_tasks(
            records,
            min_interactions=cfg.data.min_interactions,
            support_size=cfg.data.support_size,
            seed=cfg.seed,
            task_unit=meta_cfg.task_unit,
        )
        if regularized and meta_cfg.gamma != 0.0:
            train_tasks = attach_size_classes(train_tasks, stats, use_taxonomy=False)
        model, _ = meta_train(
            fresh_model(), train_tasks, features, meta_cfg, cfg.train.steps,
            regularized=regularized,
            early_stop_patience=cfg.train.early_stop_patience,
        )
        return model

    def adapted(model, meta_cfg: MetaConfig):
        return meta_inference(model, tasks, features, meta_cfg)

    if study == "debias_gamma":
        for gamma in cfg.ablation.gammas:
            meta_cfg = replace(_meta_config(cfg, loss), gamma=float(gamma))
            model = train_meta(meta_cfg, regularized=True, records=train_records)
            report, metrics = evaluate(adapted(model, meta_cfg))
            label = f"gamma={gamma:g}"
            save_report(out / f"report_{label}.json", report)
            rows.append((label, metrics))
    elif study == "negative_sampling":
        for strategy in ("n0", "n1", "n2"):
            meta_cfg = _meta_config(cfg, loss)
            positives = [r for r in train_records if r.label > 0]
            negatives = negative_sample(
                positives, NegativeStrategy(strategy), stats,
                ratio=cfg.data.negative_ratio, seed=cfg.seed,
            )
            model = train_meta(
                meta_cfg, regularized=False, records=train_records + negatives
            )
            report, metrics = evaluate(adapted(model, meta_cfg))
            save_report(out / f"report_{strategy}.json", report)
            rows.append((strategy, metrics))
    elif study == "task_unit":
        for unit in ("shop", "item", "user"):
            meta_cfg = replace(_meta_config(cfg, loss), task_unit=TaskUnit(unit))
            model = train_meta(meta_cfg, regularized=False, records=train_records)
            report, metrics = evaluate(adapted(model, meta_cfg))
            save_report(out / f"report_{unit}.json", report)
            rows.append((unit, metrics))
    elif study == "one_shop":
        meta_cfg = _meta_config(cfg, loss)
        eligible = sorted(
            {t.shop_id for t in tasks}
            & {r.shop_id for r in train_records}
        )
        if not eligible:
            raise DataError("one_shop study needs shops present in train and test")
        rng = np.random.default_rng([cfg.seed, _TAG_ABLATION])
        n_sample = min(cfg.ablation.n_shops, len(eligible))
        picked = sorted(
            eligible[i] for i in rng.choice(len(eligible), n_sample, replace=False)
        )
        sample_tasks = [t for t in tasks if t.shop_id in picked]
        meta_model = train_meta(meta_cfg, regularized=False, records=train_records)
        adapted_models = meta_inference(meta_model, sample_tasks, features, meta_cfg)
        report = evaluate_tasks(
            adapted_models, sample_tasks, features, _eval_options(cfg),
            shop_classes=stats.taxonomy, user_pool=pool,
            baseline_histories=histories,
        )
        save_report(out / "report_meta.json", report)
        rows.append(("meta_adapted", _grid_metrics(report)))
        one_shop_models = {}
        for shop in picked:
            subset = [r for r in train_records if r.shop_id == shop]
            if not subset:
                raise DataError(f"no training records for sampled shop {shop!r}")
            fresh = _build_fresh_model(
                cfg, features, feature_mode, sigmoid,
                [cfg.seed, _TAG_ONE_SHOP_INIT, stable_hash64(shop)],
            )
            trained, _ = one_shop_train(
                fresh, subset, features, meta_cfg, cfg.train.epochs,
                cfg.train.batch_size,
            )
            one_shop_models[shop] = trained
        report = evaluate_tasks(
            one_shop_models, sample_tasks, features, _eval_options(cfg),
            shop_classes=stats.taxonomy, user_pool=pool,
            baseline_histories=histories,
        )
        save_report(out / "report_one_shop.json", report)
        rows.append(("one_shop", _grid_metrics(report)))
    else:
        raise ConfigError(f"unknown ablation study {study!r}")

    _write_grid(out, study, rows)
    entries = [("command", "ablation"), ("study", study), ("seed", cfg.seed)]
    entries += [("rows", ",".join(label for label, _ in rows))]
    entries.append(("wall_time_seconds", f"{time.monotonic() - started:.3f}"))
    write_manifest(out / f"ablation_{study}.manifest", entries)
    print(f"{study} grid with {len(rows)} settings written to "
          f"{out / f'ablation_{study}.tsv'}")
    return 0


def cmd_prep_ml1m(source: str, out: str, holdout: str | None, year: int) -> int:
    holdout_list = (
        [s for s in holdout.split(",") if s] if holdout is not None else None
    )
    counts = convert_ml1m(source, out, holdout_list, train_before_year=year)
    print(
        f"converted {counts['train_records']} train and "
        f"{counts['test_records']} test ratings "
        f"({counts['holdout_shops']} held-out shops) into {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise ConfigError(message)


def _add_config_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="YAML run config")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value (dotted keys, YAML-parsed values)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="metashop",
        description=(
            "Shop-level meta-learning for cold-start item advertisement: "
            "generate data, train, adapt per shop, evaluate, and run "
            "ablation grids."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (
        ("gen-data", "generate a synthetic marketplace dataset"),
        ("train", "train a model and write a checkpoint"),
        ("adapt", "adapt a checkpoint to each shop in a support file"),
        ("evaluate", "score a checkpoint on test tasks and write reports"),
        ("ablation", "run a named comparison grid"),
    ):
        p = sub.add_parser(name, help=text, description=text)
        _add_config_args(p)

    p = sub.add_parser("report", help="render a saved report as tables")
    p.add_argument("--report", required=True, help="report.json path")
    p.add_argument("--out", default=None, help="write tables here (default stdout)")

    p = sub.add_parser(
        "prep-ml1m", help="convert a MovieLens 1M dump (genres become shops)"
    )
    p.add_argument("--source", required=True, help="directory with *.dat files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--holdout", default=None,
        help="comma-separated shops to hold out of training (default: automatic)",
    )
    p.add_argument(
        "--train-before-year", type=int, default=1998,
        help="movies released before this year form the training period",
    )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "report":
            return cmd_report(args.report, args.out)
        if args.command == "prep-ml1m":
            return cmd_prep_ml1m(
                args.source, args.out, args.holdout, args.train_before_year
            )
        cfg = load_config(args.config, args.overrides)
        handler = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "adapt": cmd_adapt,
            "evaluate": cmd_evaluate,
            "ablation": cmd_ablation,
        }[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ShapeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except MetaShopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
