"""Model bundles: feature encoders, scoring networks, and the distance baseline.

A RecModel ties together a user encoder, an item encoder, and a scoring
network so that one gradient step can update embedding tables and dense
layers together (the whole bundle is a parameter tree; gradients reuse the
same containers).

Model kinds:
  * MESH: two MLP towers joined by a dot product of their outputs.
  * MESH_I: one joint MLP on the concatenation [user; item].
  * WIDE_DEEP: same joint architecture as MESH_I; it differs only in how it
    is trained (pooled, non-meta).
  * BASELINE: an item-mapper MLP; a user is the mean of the mapped items
    they purchased, and the score is the negated Euclidean distance between
    the user representation and the mapped item.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import numcore
from .errors import (
    ColdUserError,
    EmptyBatchError,
    OutOfVocabularyError,
    ShapeError,
)


class ModelKind(enum.Enum):
    MESH = "mesh"
    MESH_I = "mesh_i"
    WIDE_DEEP = "wide_deep"
    BASELINE = "baseline"


class EncoderMode(enum.Enum):
    PRETRAINED = "pretrained"
    CATEGORICAL = "categorical"


class FeatureSource(Protocol):
    """Anything that can hand back raw per-id features."""

    def user_raw(self, user_id: str) -> Any: ...

    def item_raw(self, item_id: str) -> Any: ...


# ---------------------------------------------------------------------------
# feature encoders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldSpec:
    """One categorical field: name plus its ordered vocabulary."""

    name: str
    categories: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(set(self.categories)) != len(self.categories):
            raise ShapeError(f"field {self.name!r} has duplicate categories")
        if not self.categories:
            raise ShapeError(f"field {self.name!r} has an empty vocabulary")

    @property
    def vocab_size(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class FeatureEncoder:
    """Maps raw user/item data to a float vector.

    PRETRAINED passes through a fixed-size float vector unchanged and owns no
    parameters. CATEGORICAL owns one embedding table per field (rows indexed
    by the field vocabulary) and outputs the concatenation of the looked-up
    rows, so its tables receive gradients like any other parameter.
    """

    mode: EncoderMode
    dim: int
    fields: tuple[FieldSpec, ...] = ()
    tables: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple(self.fields))
        if self.mode is EncoderMode.PRETRAINED:
            if self.fields or self.tables:
                raise ShapeError("pretrained encoders own no fields or tables")
            if self.dim < 0:
                # dim 0 is allowed: a side that contributes no features
                raise ShapeError(f"encoder dim must be >= 0, got {self.dim}")
            return
        if not self.fields:
            raise ShapeError("categorical encoders need at least one field")
        if set(self.tables) != {f.name for f in self.fields}:
            raise ShapeError("tables do not match the declared fields")
        coerced = {}
        total = 0
        for f in self.fields:
            t = np.asarray(self.tables[f.name], dtype=np.float64)
            if t.ndim != 2 or t.shape[0] != f.vocab_size:
                raise ShapeError(
                    f"table for field {f.name!r} has shape {t.shape}, "
                    f"expected ({f.vocab_size}, *)"
                )
            coerced[f.name] = t
            total += t.shape[1]
        object.__setattr__(self, "tables", coerced)
        if total != self.dim:
            raise ShapeError(f"encoder dim {self.dim} != sum of table dims {total}")


def pretrained_encoder(dim: int) -> FeatureEncoder:
    return FeatureEncoder(EncoderMode.PRETRAINED, dim)


def build_categorical_encoder(
    fields: Sequence[tuple[str, Sequence[str]]],
    embedding_dim: int,
    rng: np.random.Generator | int,
) -> FeatureEncoder:
    """Seeded uniform(-1/sqrt(d), 1/sqrt(d)) tables, one per field, shared dim."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    specs = tuple(FieldSpec(name, tuple(cats)) for name, cats in fields)
    limit = 1.0 / np.sqrt(embedding_dim)
    tables = {
        s.name: rng.uniform(-limit, limit, size=(s.vocab_size, embedding_dim))
        for s in specs
    }
    return FeatureEncoder(
        EncoderMode.CATEGORICAL, embedding_dim * len(specs), specs, tables
    )


def resolve_indices(encoder: FeatureEncoder, raw: Any) -> np.ndarray:
    """Turn raw categorical data into one table row index per field.

    ``raw`` is either a mapping {field name: category value} or a sequence of
    integer indices in field order. Unknown categories and out-of-range
    indices raise OutOfVocabularyError.
    """
    if encoder.mode is not EncoderMode.CATEGORICAL:
        raise ShapeError("resolve_indices needs a categorical encoder")
    idx = np.empty(len(encoder.fields), dtype=np.int64)
    if isinstance(raw, Mapping):
        for j, f in enumerate(encoder.fields):
            if f.name not in raw:
                raise OutOfVocabularyError(f"missing field {f.name!r}")
            value = raw[f.name]
            try:
                idx[j] = f.categories.index(value)
            except ValueError:
                raise OutOfVocabularyError(
                    f"unknown category {value!r} for field {f.name!r}"
                ) from None
        return idx
    values = list(raw)
    if len(values) != len(encoder.fields):
        raise ShapeError(
            f"{len(values)} indices for {len(encoder.fields)} fields"
        )
    for j, (f, v) in enumerate(zip(encoder.fields, values)):
        v = int(v)
        if not 0 <= v < f.vocab_size:
            raise OutOfVocabularyError(
                f"index {v} out of range for field {f.name!r} "
                f"(vocabulary size {f.vocab_size})"
            )
        idx[j] = v
    return idx


def encode_indices(encoder: FeatureEncoder, idx: np.ndarray) -> np.ndarray:
    """Gather and concatenate table rows for an (n, n_fields) index matrix."""
    parts = [encoder.tables[f.name][idx[:, j]] for j, f in enumerate(encoder.fields)]
    return np.concatenate(parts, axis=1)


def encode(encoder: FeatureEncoder, raw: Any) -> np.ndarray:
    """Encode one user or item into its float feature vector."""
    if encoder.mode is EncoderMode.PRETRAINED:
        vec = np.asarray(raw, dtype=np.float64).ravel()
        if vec.shape != (encoder.dim,):
            raise ShapeError(
                f"pretrained feature has {vec.shape[0]} dims, expected {encoder.dim}"
            )
        return vec
    idx = resolve_indices(encoder, raw)
    return encode_indices(encoder, idx[None, :])[0]


# ---------------------------------------------------------------------------
# scoring model bundle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecModel:
    """Encoders plus scoring network, treated as one parameter tree."""

    kind: ModelKind
    user_encoder: FeatureEncoder
    item_encoder: FeatureEncoder
    scorer: numcore.ModelParameters
    sigmoid_output: bool = False

    def __post_init__(self) -> None:
        if self.kind is ModelKind.BASELINE:
            raise ShapeError("the distance baseline uses BaselineModel")
        want_tt = self.kind is ModelKind.MESH
        is_tt = self.scorer.variant is numcore.ModelVariant.TWO_TOWER
        if want_tt != is_tt:
            raise ShapeError(
                f"{self.kind.value} does not match scorer variant "
                f"{self.scorer.variant.value}"
            )
        if is_tt:
            if self.scorer.user_tower.in_dim != self.user_encoder.dim:
                raise ShapeError(
                    f"user tower expects {self.scorer.user_tower.in_dim} dims, "
                    f"encoder gives {self.user_encoder.dim}"
                )
            if self.scorer.item_tower.in_dim != self.item_encoder.dim:
                raise ShapeError(
                    f"item tower expects {self.scorer.item_tower.in_dim} dims, "
                    f"encoder gives {self.item_encoder.dim}"
                )
        else:
            total = self.user_encoder.dim + self.item_encoder.dim
            if self.scorer.joint.in_dim != total:
                raise ShapeError(
                    f"joint MLP expects {self.scorer.joint.in_dim} dims, "
                    f"encoders give {total}"
                )


def build_model(
    kind: ModelKind,
    user_encoder: FeatureEncoder,
    item_encoder: FeatureEncoder,
    hidden_dims: Sequence[int],
    rng: np.random.Generator | int,
    sigmoid_output: bool = False,
) -> RecModel:
    """Initialise a scoring network matching the encoder output dims."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    hidden = list(hidden_dims)
    if kind is ModelKind.MESH:
        scorer = numcore.init_two_tower(
            [user_encoder.dim] + hidden, [item_encoder.dim] + hidden, rng
        )
    elif kind in (ModelKind.MESH_I, ModelKind.WIDE_DEEP):
        scorer = numcore.init_joint(
            [user_encoder.dim + item_encoder.dim] + hidden + [1], rng
        )
    else:
        raise ShapeError("build_model handles mesh, mesh_i, and wide_deep")
    return RecModel(kind, user_encoder, item_encoder, scorer, sigmoid_output)


def encode_user(model: RecModel, raw: Any) -> np.ndarray:
    return encode(model.user_encoder, raw)


def encode_item(model: RecModel, raw: Any) -> np.ndarray:
    return encode(model.item_encoder, raw)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    """Labelled examples with features resolved as far as possible.

    Pretrained encoders give float matrices; categorical encoders keep the
    index matrices so gradients can be scattered back into the tables.
    """

    labels: np.ndarray
    user_feats: np.ndarray | None = None
    item_feats: np.ndarray | None = None
    user_idx: np.ndarray | None = None
    item_idx: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def prepare_batch(
    records: Iterable[Any],
    features: FeatureSource,
    user_encoder: FeatureEncoder,
    item_encoder: FeatureEncoder,
) -> Batch:
    """Resolve record ids into a Batch via the feature source and encoders.

    Records only need ``user_id``, ``item_id``, and ``label`` attributes.
    """
    recs = list(records)
    if not recs:
        raise EmptyBatchError("prepare_batch on zero records")
    labels = np.asarray([float(r.label) for r in recs])
    kwargs: dict[str, Any] = {}
    for side, enc, getter in (
        ("user", user_encoder, lambda r: features.user_raw(r.user_id)),
        ("item", item_encoder, lambda r: features.item_raw(r.item_id)),
    ):
        if enc.mode is EncoderMode.PRETRAINED:
            mat = np.stack(
                [np.asarray(getter(r), dtype=np.float64).ravel() for r in recs]
            )
            if mat.shape[1] != enc.dim:
                raise ShapeError(
                    f"{side} features have {mat.shape[1]} dims, expected {enc.dim}"
                )
            kwargs[f"{side}_feats"] = mat
        else:
            kwargs[f"{side}_idx"] = np.stack(
                [resolve_indices(enc, getter(r)) for r in recs]
            )
    return Batch(labels=labels, **kwargs)


def _feature_matrices(model: RecModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    if batch.user_feats is not None:
        u = batch.user_feats
    else:
        u = encode_indices(model.user_encoder, batch.user_idx)
    if batch.item_feats is not None:
        v = batch.item_feats
    else:
        v = encode_indices(model.item_encoder, batch.item_idx)
    return u, v


def _encoder_grad(
    encoder: FeatureEncoder, idx: np.ndarray | None, d_feats: np.ndarray
) -> FeatureEncoder:
    if encoder.mode is EncoderMode.PRETRAINED:
        return encoder  # no parameters; the grad tree reuses the empty encoder
    tables = {}
    offset = 0
    for j, f in enumerate(encoder.fields):
        width = encoder.tables[f.name].shape[1]
        g = np.zeros_like(encoder.tables[f.name])
        np.add.at(g, idx[:, j], d_feats[:, offset : offset + width])
        tables[f.name] = g
        offset += width
    return FeatureEncoder(EncoderMode.CATEGORICAL, encoder.dim, encoder.fields, tables)


def predict_scores(model: RecModel, batch: Batch) -> np.ndarray:
    """Model scores for a batch, sigmoid-squashed when the model says so."""
    u, v = _feature_matrices(model, batch)
    raw, _ = numcore.model_forward_trace(model.scorer, u, v)
    return numcore.sigmoid(raw) if model.sigmoid_output else raw


def model_loss_and_grad(
    model: RecModel,
    batch: Batch,
    loss_kind: numcore.LossKind,
    pred_penalty: tuple[float, float] | None = None,
) -> tuple[float, RecModel]:
    """Loss and gradient over the whole bundle (tables + scoring network).

    Args:
        model: the bundle to differentiate.
        batch: resolved examples.
        loss_kind: squared error or binary cross-entropy.
        pred_penalty: optional (a, c) adding ``a * mean(pred) + c`` to the
            objective; used for the fairness regularizers applied to the
            same predictions the loss sees.

    Returns:
        (objective value, gradients as a RecModel-shaped tree)
    """
    if batch.size == 0:
        raise EmptyBatchError("gradient on an empty batch")
    u, v = _feature_matrices(model, batch)
    raw, trace = numcore.model_forward_trace(model.scorer, u, v)
    pred = numcore.sigmoid(raw) if model.sigmoid_output else raw
    loss, d_pred = numcore.loss_and_pred_grad(pred, batch.labels, loss_kind)
    if pred_penalty is not None:
        a, c = pred_penalty
        loss += a * float(np.mean(pred)) + c
        d_pred = d_pred + a / batch.size
    d_raw = d_pred * pred * (1.0 - pred) if model.sigmoid_output else d_pred
    scorer_grads, d_u, d_v = numcore.model_backward(model.scorer, trace, d_raw)
    grads = RecModel(
        model.kind,
        _encoder_grad(model.user_encoder, batch.user_idx, d_u),
        _encoder_grad(model.item_encoder, batch.item_idx, d_v),
        scorer_grads,
        model.sigmoid_output,
    )
    numcore.tree_check_finite(grads, "model_loss_and_grad")
    return loss, grads


# ---------------------------------------------------------------------------
# distance baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineParams:
    """Item-mapper MLP plus the contrastive-loss hyperparameters."""

    item_mapper: numcore.MlpParams
    margin: float
    negative_weight: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.margin) and self.margin > 0):
            raise ShapeError(f"margin must be positive, got {self.margin}")
        if not (np.isfinite(self.negative_weight) and self.negative_weight >= 0):
            raise ShapeError(
                f"negative_weight must be >= 0, got {self.negative_weight}"
            )


@dataclass(frozen=True)
class BaselineModel:
    item_encoder: FeatureEncoder
    params: BaselineParams

    @property
    def kind(self) -> ModelKind:
        return ModelKind.BASELINE


def build_baseline(
    item_encoder: FeatureEncoder,
    hidden_dims: Sequence[int],
    rng: np.random.Generator | int,
    margin: float = 1.0,
    negative_weight: float = 1.0,
) -> BaselineModel:
    mapper = numcore.init_mlp([item_encoder.dim] + list(hidden_dims), rng)
    return BaselineModel(item_encoder, BaselineParams(mapper, margin, negative_weight))


def baseline_item_reps(model: BaselineModel, item_feats: np.ndarray) -> np.ndarray:
    """Map encoded item features (n, d) to representations (n, h)."""
    out, _ = numcore.mlp_forward_trace(model.params.item_mapper, item_feats)
    return out


def baseline_user_representation(
    params: BaselineParams, purchased_feats: Sequence[np.ndarray] | np.ndarray
) -> np.ndarray:
    """Mean of the mapped purchased items; no history raises ColdUserError."""
    feats = np.asarray(purchased_feats, dtype=np.float64)
    if feats.size == 0:
        raise ColdUserError("user has no purchase history")
    if feats.ndim == 1:
        feats = feats[None, :]
    out, _ = numcore.mlp_forward_trace(params.item_mapper, feats)
    return out.mean(axis=0)


def baseline_contrastive_loss(
    params: BaselineParams,
    positives: Sequence[tuple[np.ndarray, np.ndarray]],
    negatives: Sequence[tuple[np.ndarray, np.ndarray]],
) -> float:
    """Sum of positive distances plus hinged negative terms.

    Each pair is (user representation, encoded item features). The negative
    term is ``negative_weight * max(0, margin - dist)`` per pair; with no
    negatives the loss is just the sum of positive distances.
    """
    if not positives and not negatives:
        raise EmptyBatchError("contrastive loss on zero pairs")
    total = 0.0
    for u, x in positives:
        rep, _ = numcore.mlp_forward_trace(params.item_mapper, np.asarray(x)[None, :])
        total += float(np.linalg.norm(u - rep[0]))
    for u, x in negatives:
        rep, _ = numcore.mlp_forward_trace(params.item_mapper, np.asarray(x)[None, :])
        total += params.negative_weight * max(
            0.0, params.margin - float(np.linalg.norm(u - rep[0]))
        )
    return total


def baseline_predict(
    params: BaselineParams, user_rep: np.ndarray, item_feats: np.ndarray
) -> float:
    """Negated distance, so that higher scores mean better matches."""
    rep, _ = numcore.mlp_forward_trace(
        params.item_mapper, np.asarray(item_feats, dtype=np.float64)[None, :]
    )
    return -float(np.linalg.norm(np.asarray(user_rep) - rep[0]))


def baseline_loss_and_grad(
    model: BaselineModel,
    pos_pairs: Sequence[tuple[str, str]],
    neg_pairs: Sequence[tuple[str, str]],
    histories: Mapping[str, Sequence[str]],
    features: FeatureSource,
) -> tuple[float, BaselineModel]:
    """Contrastive loss and its gradient, with users as mapped-history means.

    User representations are recomputed from the current mapper inside the
    loss, so gradients flow through both the target item and every item in
    the user's history.

    Args:
        model: the baseline bundle.
        pos_pairs / neg_pairs: (user_id, item_id) pairs.
        histories: purchased item ids per user (training positives).
        features: raw feature lookup.

    Returns:
        (loss, gradients as a BaselineModel-shaped tree)
    """
    if not pos_pairs and not neg_pairs:
        raise EmptyBatchError("gradient on zero pairs")
    users = sorted({u for u, _ in pos_pairs} | {u for u, _ in neg_pairs})
    for u in users:
        if not histories.get(u):
            raise ColdUserError(f"user {u!r} has no purchase history")
    item_ids = sorted(
        {i for _, i in pos_pairs}
        | {i for _, i in neg_pairs}
        | {i for u in users for i in histories[u]}
    )
    row_of = {i: r for r, i in enumerate(item_ids)}
    enc = model.item_encoder
    if enc.mode is EncoderMode.PRETRAINED:
        feats = np.stack(
            [np.asarray(features.item_raw(i), dtype=np.float64) for i in item_ids]
        )
        idx = None
    else:
        idx = np.stack([resolve_indices(enc, features.item_raw(i)) for i in item_ids])
        feats = encode_indices(enc, idx)
    reps, caches = numcore.mlp_forward_trace(model.params.item_mapper, feats)

    user_rep = {
        u: reps[[row_of[i] for i in histories[u]]].mean(axis=0) for u in users
    }
    d_reps = np.zeros_like(reps)
    d_user: dict[str, np.ndarray] = {u: np.zeros(reps.shape[1]) for u in users}
    loss = 0.0
    lam, m = model.params.negative_weight, model.params.margin
    for pairs, positive in ((pos_pairs, True), (neg_pairs, False)):
        for u, i in pairs:
            diff = user_rep[u] - reps[row_of[i]]
            dist = float(np.linalg.norm(diff))
            if positive:
                loss += dist
                dl_dd = 1.0
            else:
                slack = m - dist
                if slack <= 0.0:
                    continue
                loss += lam * slack
                dl_dd = -lam
            if dist == 0.0:
                continue  # zero subgradient at the kink
            g = dl_dd * diff / dist
            d_user[u] += g
            d_reps[row_of[i]] -= g
    for u in users:
        hist = histories[u]
        share = d_user[u] / len(hist)
        for i in hist:
            d_reps[row_of[i]] += share
    mapper_grads, d_feats = numcore.mlp_backward(
        model.params.item_mapper, caches, d_reps
    )
    grads = BaselineModel(
        _encoder_grad(enc, idx, d_feats),
        BaselineParams(mapper_grads, model.params.margin, model.params.negative_weight),
    )
    numcore.tree_check_finite(grads, "baseline_loss_and_grad")
    return loss, grads


# ---------------------------------------------------------------------------
# generic prediction dispatch
# ---------------------------------------------------------------------------


def predict(
    kind: ModelKind,
    params: numcore.ModelParameters | BaselineParams,
    user_feat: np.ndarray,
    item_feat: np.ndarray,
) -> float:
    """Score one encoded (user, item) pair for any model kind.

    For BASELINE, ``user_feat`` is the user representation (mapped-history
    mean) and ``item_feat`` the encoded item features.
    """
    if kind is ModelKind.MESH:
        return float(numcore.score_two_tower(params, user_feat, item_feat))
    if kind in (ModelKind.MESH_I, ModelKind.WIDE_DEEP):
        return float(numcore.score_joint(params, user_feat, item_feat))
    return baseline_predict(params, user_feat, item_feat)
