"""Two-phase update scenario: old model, prototypes, new model, feature extraction.

:class:`CompatibleEmbedder` is the estimator that does the training; the
module-level functions wire it to :class:`~ocacompat.datagen.Dataset` objects
and to the on-disk formats.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .exceptions import ParseError, StructuralError, UnsupportedVersionError
from .losses import MODES, LossBreakdown, LossSpec
from .retrieval import FeatureStore

PROTOTYPES_FORMAT = "ocacompat-prototypes"
OLD_STREAM = 0
NEW_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    d_old: int = 16
    d_extra: int = 4
    lambda1: float = 1.0
    lambda2: float = 5.0
    lambda_bct: float = 1.0
    mode: str = "oca"
    hidden: tuple = (64, 64)
    ortho_init_scale: float = 0.01
    warm_start: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.mode not in MODES:
            raise StructuralError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epochs", "batch_size", "d_old"):
            if getattr(self, name) < 1:
                raise StructuralError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_extra < 0:
            raise StructuralError(f"d_extra must be >= 0, got {self.d_extra}")
        if self.mode.startswith("oca") and self.d_extra == 0:
            raise StructuralError(f"mode {self.mode!r} needs d_extra >= 1")
        if any(h < 1 for h in self.hidden):
            raise StructuralError(f"hidden sizes must be positive, got {self.hidden}")
        if not self.lr > 0:
            raise StructuralError(f"lr must be > 0, got {self.lr}")
        if self.ortho_init_scale < 0:
            raise StructuralError("ortho_init_scale must be >= 0")
        LossSpec(self.mode, self.lambda1, self.lambda2, self.lambda_bct)

    @property
    def loss_spec(self):
        return LossSpec(self.mode, self.lambda1, self.lambda2, self.lambda_bct)

    @property
    def embedding_dim(self):
        return self.d_old + self.d_extra if self.mode.startswith("oca") else self.d_old

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise StructuralError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prototypes:
    vectors: np.ndarray
    counts: np.ndarray

    @property
    def num_classes(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


@dataclass
class ModelBundle:
    backbone: nn.Backbone
    classifier: nn.Classifier
    config: TrainConfig
    ortho: nn.OrthoLayer | None = None
    history: list = field(default_factory=list)
    role: str = "new"

    @property
    def d_old(self):
        return self.config.d_old

    @property
    def embedding_dim(self):
        return self.backbone.embedding_dim

    def tensors(self):
        t = dict(self.backbone.parameters())
        t["classifier.W"] = self.classifier.weights
        if self.ortho is not None:
            t["ortho.params"] = self.ortho.params
        return t


class CompatibleEmbedder(TransformerMixin, BaseEstimator):
    """Embedding network trained under one of the compatibility objectives.

    ``mode="independent"`` is plain classification training (also used for the
    old model). ``"bct"`` adds the influence loss against frozen prototypes.
    The ``"oca*"`` modes train an expanded ``d_old + d_extra`` embedding whose
    leading ``d_old`` coordinates are aligned to the prototypes, with the
    learnable classifier reading it through an orthogonal layer (except in
    the ``*_no_ortho`` ablations).

    ``random_stream`` separates the random draws of models that share a
    seed, so an old and a new model never start from the same weights.

    ``transform`` returns backbone features only: the orthogonal layer and the
    classifier take no part in inference. ``part="bct"`` keeps the leading
    ``d_old`` coordinates.
    """

    def __init__(
        self,
        mode="oca",
        d_old=16,
        d_extra=4,
        hidden=(64, 64),
        epochs=30,
        batch_size=128,
        lr=1e-3,
        lambda1=1.0,
        lambda2=5.0,
        lambda_bct=1.0,
        ortho_init_scale=0.01,
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        seed=0,
        random_stream=0,
        part="full",
    ):
        self.mode = mode
        self.d_old = d_old
        self.d_extra = d_extra
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda_bct = lambda_bct
        self.ortho_init_scale = ortho_init_scale
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.seed = seed
        self.random_stream = random_stream
        self.part = part

    def _config(self):
        params = self.get_params()
        params.pop("part")
        params.pop("random_stream")
        return TrainConfig(**params)

    def fit(self, X, y, prototypes=None, sample_ids=None, init_from=None):
        """Train from scratch (or warm-started from ``init_from``'s backbone).

        When ``sample_ids`` is given, samples are put in id order first so
        the result does not depend on the order they were supplied in.
        """
        config = self._config()
        X, y = check_X_y(X, y, dtype=np.float64)
        if sample_ids is not None:
            order = np.argsort(np.asarray(sample_ids), kind="stable")
            X, y = X[order], y[order]
        y = y.astype(np.int64)
        num_classes = int(y.max()) + 1
        spec = config.loss_spec
        proto_vectors = None
        if spec.mode != "independent":
            if prototypes is None:
                raise StructuralError(f"mode {spec.mode!r} needs prototypes")
            proto_vectors = getattr(prototypes, "vectors", prototypes)
            proto_vectors = np.asarray(proto_vectors, dtype=np.float64)
            if proto_vectors.shape[1] != config.d_old:
                raise StructuralError(
                    f"prototype dim {proto_vectors.shape[1]} != d_old {config.d_old}"
                )
            if proto_vectors.shape[0] < num_classes:
                raise StructuralError(
                    f"prototypes cover {proto_vectors.shape[0]} classes, labels need {num_classes}"
                )
            num_classes = max(num_classes, proto_vectors.shape[0])

        init_ss, head_ss, shuffle_ss = np.random.SeedSequence([config.seed, self.random_stream]).spawn(3)
        layer_dims = [X.shape[1], *config.hidden, config.embedding_dim]
        backbone = nn.init_backbone(layer_dims, init_ss)
        if init_from is not None:
            _warm_start(backbone, init_from.backbone)
        head_rng = np.random.default_rng(head_ss)
        classifier = nn.Classifier.init(num_classes, config.embedding_dim, head_rng)
        ortho = None
        if spec.uses_ortho:
            ortho = nn.OrthoLayer.init(config.embedding_dim, head_rng, config.ortho_init_scale)

        params = backbone.parameters()
        params["classifier.W"] = classifier.weights
        if ortho is not None:
            params["ortho.params"] = ortho.params
        state = nn.AdamState()
        shuffler = np.random.default_rng(shuffle_ss)
        history = []
        n = len(y)
        for _ in range(config.epochs):
            perm = shuffler.permutation(n)
            sums = np.zeros(4)
            for start in range(0, n, config.batch_size):
                idx = perm[start : start + config.batch_size]
                xb, yb = X[idx], y[idx]
                nn.forward(backbone, xb)
                breakdown, grads = nn.backward(backbone, ortho, classifier, proto_vectors, xb, yb, spec)
                nn.adam_step(params, grads, state, config.lr, config.beta1, config.beta2, config.eps)
                backbone.invalidate()
                if ortho is not None:
                    ortho.refresh()
                sums += len(idx) * np.array(
                    [breakdown.total, breakdown.ce_new, breakdown.ce_proto, breakdown.cos_align]
                )
            history.append(LossBreakdown(*(sums / n).tolist()).as_dict())

        self.bundle_ = ModelBundle(backbone, classifier, config, ortho, history)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.arange(num_classes)
        return self

    @property
    def history_(self):
        check_is_fitted(self, "bundle_")
        return self.bundle_.history

    def transform(self, X):
        check_is_fitted(self, "bundle_")
        X = check_array(X, dtype=np.float64)
        return embed_bundle(self.bundle_, X, self.part)

    def predict(self, X):
        """Class decisions of the training-time head (orthogonal layer included)."""
        check_is_fitted(self, "bundle_")
        X = check_array(X, dtype=np.float64)
        h = nn.embed(self.bundle_.backbone, X)
        if self.bundle_.ortho is not None:
            h = self.bundle_.ortho.apply(h)
        return np.argmax(h @ self.bundle_.classifier.weights.T, axis=1)

    @classmethod
    def from_bundle(cls, bundle, part="full"):
        params = bundle.config.to_dict()
        params.pop("warm_start")
        stream = OLD_STREAM if bundle.role == "old" else NEW_STREAM
        est = cls(**params, random_stream=stream, part=part)
        est.bundle_ = bundle
        est.n_features_in_ = bundle.backbone.input_dim
        est.classes_ = np.arange(bundle.classifier.num_classes)
        return est


def _warm_start(backbone, source):
    for i, (w, b) in enumerate(zip(source.weights, source.biases)):
        if i >= len(backbone.weights) or backbone.weights[i].shape[1] != w.shape[1]:
            break
        rows = min(w.shape[0], backbone.weights[i].shape[0])
        if rows != backbone.weights[i].shape[0] and i != len(backbone.weights) - 1:
            break
        backbone.weights[i][:rows] = w[:rows]
        backbone.biases[i][:rows] = b[:rows]


def embed_bundle(bundle, X, part="full"):
    """Backbone features of ``X``; ``part="bct"`` keeps the leading ``d_old`` columns."""
    h = nn.embed(bundle.backbone, X)
    if part == "full":
        if bundle.embedding_dim == bundle.d_old:
            raise StructuralError(
                "part='full' needs an expanded model; this one only has the d_old embedding"
            )
        return h
    if part == "bct":
        return h[:, : bundle.d_old]
    raise StructuralError(f"part must be 'full' or 'bct', got {part!r}")


def train_old(config, dataset_old):
    """Plain cross-entropy training of a ``d_old`` embedding."""
    if len(dataset_old) == 0:
        raise StructuralError("old training set is empty")
    cfg = replace(config, mode="independent")
    params = cfg.to_dict()
    params.pop("warm_start")
    model = CompatibleEmbedder(**params, random_stream=OLD_STREAM).fit(dataset_old.X, dataset_old.labels, sample_ids=dataset_old.ids)
    model.bundle_.role = "old"
    return model.bundle_


def compute_prototypes(model_old, dataset):
    """Per-class mean of old-model features over every class in ``dataset``."""
    feats = nn.embed(model_old.backbone, dataset.X)
    vectors = np.empty((dataset.num_classes, feats.shape[1]))
    counts = np.zeros(dataset.num_classes, dtype=np.int64)
    for y in range(dataset.num_classes):
        rows = feats[dataset.labels == y]
        if len(rows) == 0:
            raise StructuralError(f"class {y} has no samples; cannot build its prototype")
        vectors[y] = rows.mean(axis=0)
        counts[y] = len(rows)
    return Prototypes(vectors, counts)


def train_new(config, dataset_new, prototypes=None, old_bundle=None):
    """Train the updated model under ``config.mode``."""
    if len(dataset_new) == 0:
        raise StructuralError("new training set is empty")
    if config.mode != "independent":
        if prototypes is None:
            raise StructuralError(f"mode {config.mode!r} needs prototypes")
        if prototypes.num_classes != dataset_new.num_classes:
            raise StructuralError(
                f"prototypes have {prototypes.num_classes} rows, dataset has "
                f"{dataset_new.num_classes} classes"
            )
    params = config.to_dict()
    params.pop("warm_start")
    init_from = old_bundle if config.warm_start else None
    if config.warm_start and old_bundle is None:
        raise StructuralError("warm_start needs the old model")
    model = CompatibleEmbedder(**params, random_stream=NEW_STREAM).fit(
        dataset_new.X,
        dataset_new.labels,
        prototypes=None if config.mode == "independent" else prototypes,
        sample_ids=dataset_new.ids,
        init_from=init_from,
    )
    return model.bundle_


def extract_features(bundle, dataset, part="full", tag=""):
    feats = embed_bundle(bundle, dataset.X, part)
    return FeatureStore(dataset.ids, dataset.labels, feats, tag)


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_bundle(bundle, path):
    meta = {
        "role": bundle.role,
        "layer_dims": bundle.backbone.layer_dims,
        "d_old": bundle.config.d_old,
        "d_extra": bundle.embedding_dim - bundle.config.d_old,
        "seed": bundle.config.seed,
        "mode": bundle.config.mode,
        "num_classes": bundle.classifier.num_classes,
        "config": bundle.config.to_dict(),
        "history": bundle.history,
    }
    nn.save_checkpoint(path, meta, bundle.tensors())


def load_bundle(path):
    meta, tensors = nn.load_checkpoint(path)
    try:
        config = TrainConfig.from_dict(meta["config"])
        dims = meta["layer_dims"]
        n_layers = len(dims) - 1
        weights = [tensors[f"backbone.W{i}"] for i in range(n_layers)]
        biases = [tensors[f"backbone.b{i}"] for i in range(n_layers)]
        backbone = nn.Backbone(dims, weights, biases)
        classifier = nn.Classifier(tensors["classifier.W"])
        ortho = None
        if "ortho.params" in tensors:
            ortho = nn.OrthoLayer(dims[-1], tensors["ortho.params"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"checkpoint is missing {exc}", str(path)) from None
    return ModelBundle(backbone, classifier, config, ortho, meta.get("history", []), meta.get("role", "new"))


def save_prototypes(protos, path):
    doc = {
        "format": PROTOTYPES_FORMAT,
        "version": 1,
        "counts": protos.counts.tolist(),
        "vectors": protos.vectors.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_prototypes(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    if doc.get("format") != PROTOTYPES_FORMAT:
        raise ParseError("not a prototypes file", str(path))
    if doc.get("version") != 1:
        raise UnsupportedVersionError(f"unsupported prototypes version {doc.get('version')!r}", str(path))
    return Prototypes(np.asarray(doc["vectors"], dtype=np.float64), np.asarray(doc["counts"], dtype=np.int64))


def append_manifest(path, run_id, cfg_hash, seed, final_losses):
    losses = json.dumps(final_losses, sort_keys=True, separators=(",", ":"))
    with open(path, "a") as fh:
        fh.write(f"{run_id}\t{cfg_hash}\t{seed}\t{losses}\n")
