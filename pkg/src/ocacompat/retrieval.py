"""Retrieval evaluation and compatibility checks over labelled feature stores."""
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import NumericError, ParseError, StructuralError, UnsupportedVersionError

STORE_MAGIC = b"OCAF"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
PADDING_MODES = ("zero", "truncate")


@dataclass(eq=False)
class FeatureStore:
    ids: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.ids):
            raise StructuralError(
                f"features of shape {self.features.shape} do not match {len(self.ids)} ids"
            )
        if len(self.labels) != len(self.ids):
            raise StructuralError("ids and labels differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise StructuralError("record ids are not unique")
        if not np.all(np.isfinite(self.features)):
            raise NumericError("feature store contains non-finite values")

    @property
    def dim(self):
        return self.features.shape[1]

    def __len__(self):
        return len(self.ids)


def save_store(store, path):
    """Binary ``OCAF`` layout; features are rounded to float32."""
    rec = np.dtype([("id", "<i8"), ("label", "<i4"), ("feat", "<f4", (store.dim,))])
    records = np.empty(len(store), dtype=rec)
    records["id"] = store.ids
    records["label"] = store.labels
    records["feat"] = store.features
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.dim, len(store)))
        fh.write(records.tobytes())


def _load_binary(raw, path):
    if len(raw) < _HEADER.size:
        raise ParseError("truncated header", f"{path}@0")
    magic, version, dim, count = _HEADER.unpack_from(raw)
    if version != STORE_VERSION:
        raise UnsupportedVersionError(f"unsupported store version {version}", f"{path}@4")
    rec = np.dtype([("id", "<i8"), ("label", "<i4"), ("feat", "<f4", (dim,))])
    expected = _HEADER.size + count * rec.itemsize
    if len(raw) != expected:
        raise ParseError(f"expected {expected} bytes for {count} records, got {len(raw)}", f"{path}@{len(raw)}")
    records = np.frombuffer(raw, dtype=rec, offset=_HEADER.size, count=count)
    return records["id"], records["label"], records["feat"].astype(np.float64).reshape(count, dim)


def _load_text(raw, path):
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError("neither an OCAF store nor UTF-8 text", str(path)) from None
    ids, labels, rows = [], [], []
    dim = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split(",")
        try:
            ids.append(int(fields[0]))
            labels.append(int(fields[1]))
            rows.append([float(v) for v in fields[2:]])
        except (ValueError, IndexError):
            raise ParseError(f"malformed record {line!r}", f"{path}:{lineno}") from None
        if dim is None:
            dim = len(rows[-1])
        if len(rows[-1]) != dim or dim == 0:
            raise ParseError(f"record has {len(rows[-1])} values, expected {dim}", f"{path}:{lineno}")
    if not rows:
        raise ParseError("no records", str(path))
    return ids, labels, np.array(rows)


def load_store(path, tag=""):
    """Read a binary ``OCAF`` store, or the one-record-per-line text form."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] == STORE_MAGIC:
        ids, labels, feats = _load_binary(raw, path)
    else:
        ids, labels, feats = _load_text(raw, path)
    try:
        return FeatureStore(ids, labels, feats, tag)
    except (StructuralError, NumericError) as exc:
        raise ParseError(str(exc), str(path)) from None


def zero_pad(store, target_dim):
    if target_dim < store.dim:
        raise StructuralError(f"cannot pad dim {store.dim} down to {target_dim}")
    feats = np.zeros((len(store), target_dim))
    feats[:, : store.dim] = store.features
    return FeatureStore(store.ids, store.labels, feats, store.tag)


def truncate(store, target_dim):
    if not 1 <= target_dim <= store.dim:
        raise StructuralError(f"cannot truncate dim {store.dim} to {target_dim}")
    return FeatureStore(store.ids, store.labels, store.features[:, :target_dim], store.tag)


def equalize_dims(queries, gallery, padding="zero"):
    """Bring both stores to a common dimension (zero-pad up, or truncate down)."""
    if queries.dim == gallery.dim:
        return queries, gallery
    if padding == "zero":
        dim = max(queries.dim, gallery.dim)
        return zero_pad(queries, dim), zero_pad(gallery, dim)
    if padding == "truncate":
        dim = min(queries.dim, gallery.dim)
        return truncate(queries, dim), truncate(gallery, dim)
    raise StructuralError(
        f"dims differ ({queries.dim} vs {gallery.dim}) and padding {padding!r} is not one of {PADDING_MODES}"
    )


def _unit_rows(store):
    norms = np.linalg.norm(store.features, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NumericError(f"zero-norm feature for record id {int(store.ids[zero[0]])}")
    return store.features / norms[:, None]


def cosine_distance_matrix(queries, gallery):
    if queries.dim != gallery.dim:
        raise StructuralError(f"dims differ: {queries.dim} vs {gallery.dim}")
    dist = 1.0 - _unit_rows(queries) @ _unit_rows(gallery).T
    return np.clip(dist, 0.0, 2.0)


def average_precision(ranked_labels, query_label):
    """Mean of precision@k over the ranks k that hold a positive; ``None`` if none do."""
    hits = np.asarray(ranked_labels) == query_label
    if not hits.any():
        return None
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


@dataclass
class RetrievalReport:
    map_at_1: float
    cmc_1: float
    num_queries: int
    num_gallery: int
    query_model: str
    gallery_model: str
    padding_mode: str
    cmc: dict = field(default_factory=dict)
    num_skipped: int = 0
    self_exclusion: bool = True

    def as_dict(self):
        return asdict(self)


def evaluate(
    queries,
    gallery,
    self_exclusion=True,
    k_list=(1,),
    padding_mode="none",
    query_model=None,
    gallery_model=None,
):
    """mAP@1.0 and CMC-k of ``queries`` against ``gallery``.

    Rankings sort by ascending cosine distance, ties by ascending gallery id.
    With ``self_exclusion`` a gallery record sharing the query's id is dropped
    from that query's ranking. Queries with no positive left are skipped and
    counted in ``num_skipped``.
    """
    if len(queries) == 0 or len(gallery) == 0:
        raise StructuralError("query and gallery stores must be non-empty")
    dist = cosine_distance_matrix(queries, gallery)
    n_q, n_g = dist.shape
    order = np.lexsort((np.broadcast_to(gallery.ids, dist.shape), dist), axis=-1)
    sorted_ids = gallery.ids[order]
    keep = np.ones_like(order, dtype=bool)
    if self_exclusion:
        keep = sorted_ids != queries.ids[:, None]
    match = (gallery.labels[order] == queries.labels[:, None]) & keep
    rank = np.cumsum(keep, axis=1)
    hits = np.cumsum(match, axis=1)
    n_pos = match.sum(axis=1)
    valid = n_pos > 0

    precision_sum = np.where(match, hits / np.maximum(rank, 1), 0.0).sum(axis=1)
    ap = precision_sum[valid] / n_pos[valid]
    k_list = sorted({int(k) for k in k_list} | {1})
    cmc = {}
    for k in k_list:
        found = (match & (rank <= k)).any(axis=1)
        cmc[k] = float(found[valid].mean()) if valid.any() else 0.0

    return RetrievalReport(
        map_at_1=float(ap.mean()) if valid.any() else 0.0,
        cmc_1=cmc[1],
        num_queries=int(n_q),
        num_gallery=int(n_g),
        query_model=query_model or queries.tag or "query",
        gallery_model=gallery_model or gallery.tag or "gallery",
        padding_mode=padding_mode,
        cmc=cmc,
        num_skipped=int(n_q - valid.sum()),
        self_exclusion=bool(self_exclusion),
    )


def ecc_check(m_cross, m_self_old):
    """Empirical compatibility: cross-model metric strictly beats old self-test."""
    return bool(m_cross > m_self_old)


@dataclass
class Def1Result:
    same_class_pairs_ok_fraction: float
    diff_class_pairs_ok_fraction: float
    same_class_pairs: int
    diff_class_pairs: int
    sampled: bool


def _pair_cosine(a, b):
    return np.clip(1.0 - np.einsum("ij,ij->i", a, b), 0.0, 2.0)


def def1_check(old_feats, new_feats, sample_cap=2_000_000, seed=0):
    """Fraction of ordered pairs ``i != j`` meeting the pairwise compatibility inequalities.

    Same-class pairs need ``d(old_i, new_j) <= d(old_i, old_j)``; different-class
    pairs need ``>=``. Distances are cosine distances. Beyond ``sample_cap``
    ordered pairs, that many pairs are drawn uniformly with a seeded generator.
    A class of pairs that never occurs reports a vacuous fraction of 1.0.
    """
    if old_feats.dim != new_feats.dim:
        raise StructuralError(f"dims differ: {old_feats.dim} vs {new_feats.dim}; zero-pad first")
    if len(old_feats) != len(new_feats) or set(old_feats.ids.tolist()) != set(new_feats.ids.tolist()):
        raise StructuralError("old and new stores must hold the same record ids")
    pos = {int(i): k for k, i in enumerate(new_feats.ids.tolist())}
    perm = np.array([pos[int(i)] for i in old_feats.ids.tolist()], dtype=np.intp)
    new_unit = _unit_rows(new_feats)[perm]
    if not np.array_equal(new_feats.labels[perm], old_feats.labels):
        raise StructuralError("old and new stores disagree on labels for the same ids")
    old_unit = _unit_rows(old_feats)
    labels = old_feats.labels
    n = len(old_feats)
    total = n * (n - 1)

    if total <= sample_cap:
        ii, jj = np.nonzero(~np.eye(n, dtype=bool))
        sampled = False
    else:
        rng = np.random.default_rng(seed)
        ii = rng.integers(0, n, size=sample_cap)
        jj = rng.integers(0, n - 1, size=sample_cap)
        jj += jj >= ii
        sampled = True
    cross = _pair_cosine(old_unit[ii], new_unit[jj])
    within = _pair_cosine(old_unit[ii], old_unit[jj])
    same = labels[ii] == labels[jj]
    n_same = int(same.sum())
    n_diff = int((~same).sum())
    same_ok = float((cross[same] <= within[same]).mean()) if n_same else 1.0
    diff_ok = float((cross[~same] >= within[~same]).mean()) if n_diff else 1.0
    return Def1Result(same_ok, diff_ok, n_same, n_diff, sampled)
