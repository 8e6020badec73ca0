"""Field schemas, quantile binning, and per-field token vocabularies.

Sequential tabular data mixes categorical and numerical columns. Both end up
in one discrete token space: numerical fields are discretized into quantile
bins fitted on training data, and every field owns a contiguous block of ids
inside a single global vocabulary shared with the special tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

STATIC = "static"
DYNAMIC = "dynamic"
CATEGORICAL = "categorical"
NUMERICAL = "numerical"

PAD_TOKEN = "[PAD]"
MASK_TOKEN = "[MASK]"
UNK_TOKEN = "[UNK]"
SPECIAL_TOKENS = (PAD_TOKEN, MASK_TOKEN, UNK_TOKEN)
PAD_ID, MASK_ID, UNK_ID = 0, 1, 2
N_SPECIALS = len(SPECIAL_TOKENS)

# Synthetic field carrying the quantized inter-record time gap; appended to
# the vocabulary at preparation time so model variants can consume time as a
# plain dynamic field.
GAP_FIELD = "__gap__"


@dataclass(frozen=True)
class FieldSchema:
    """One column: its role within a sequence and its value type."""

    name: str
    kind: str
    dtype: str
    n_bins: int | None = None

    def __post_init__(self):
        if self.kind not in (STATIC, DYNAMIC):
            raise DataError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.dtype not in (CATEGORICAL, NUMERICAL):
            raise DataError(f"field {self.name!r}: unknown dtype {self.dtype!r}")
        if self.dtype == NUMERICAL:
            if self.n_bins is None or self.n_bins < 2:
                raise DataError(
                    f"numerical field {self.name!r} needs n_bins >= 2, got {self.n_bins}"
                )

    def to_json_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "dtype": self.dtype}
        if self.n_bins is not None:
            d["n_bins"] = self.n_bins
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "FieldSchema":
        return cls(d["name"], d["kind"], d["dtype"], d.get("n_bins"))


class Schema:
    """Ordered collection of field schemas plus an optional label field."""

    def __init__(self, fields: list[FieldSchema], label_field: str | None = None):
        if not fields:
            raise DataError("schema has no fields")
        names = [f.name for f in fields]
        if len(set(names)) != len(names):
            raise DataError("duplicate field names in schema")
        if not any(f.kind == DYNAMIC for f in fields):
            raise DataError("schema needs at least one dynamic field")
        if label_field is not None and label_field not in names:
            raise DataError(f"label field {label_field!r} is not in the schema")
        self.fields = list(fields)
        self.label_field = label_field
        self._by_name = {f.name: f for f in fields}

    def __iter__(self):
        return iter(self.fields)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def field(self, name: str) -> FieldSchema:
        try:
            return self._by_name[name]
        except KeyError:
            raise DataError(f"unknown field {name!r}") from None

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def static_fields(self) -> list[FieldSchema]:
        return [f for f in self.fields if f.kind == STATIC]

    @property
    def dynamic_fields(self) -> list[FieldSchema]:
        return [f for f in self.fields if f.kind == DYNAMIC]

    @property
    def numerical_fields(self) -> list[FieldSchema]:
        return [f for f in self.fields if f.dtype == NUMERICAL]

    def feature_fields(self, label_in_features: bool) -> list[FieldSchema]:
        """Fields fed to the model; drops the label column when excluded."""
        if label_in_features or self.label_field is None:
            return list(self.fields)
        return [f for f in self.fields if f.name != self.label_field]

    def with_field(self, extra: FieldSchema) -> "Schema":
        return Schema(self.fields + [extra], self.label_field)

    def to_json_dict(self) -> dict:
        return {
            "fields": [f.to_json_dict() for f in self.fields],
            "label_field": self.label_field,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Schema":
        fields = [FieldSchema.from_json_dict(x) for x in d["fields"]]
        return cls(fields, d.get("label_field"))


def _is_missing(v) -> bool:
    return v is None or (isinstance(v, str) and v.strip() == "")


def _as_number(v) -> float | None:
    """Parse v as a finite real number, or return None."""
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float, np.integer, np.floating)):
        x = float(v)
    elif isinstance(v, str):
        try:
            x = float(v)
        except ValueError:
            return None
    else:
        return None
    return x if math.isfinite(x) else None


def infer_schema(
    rows: list[dict],
    static_field_names: list[str],
    label_field: str | None = None,
    *,
    n_bins: int = 32,
    reserved: tuple[str, ...] = ("seq_id", "time"),
) -> Schema:
    """Assign a kind and dtype to every column of a record set.

    A column is numerical iff every non-missing value parses as a finite real
    number. Columns named in `reserved` (sequence id, timestamp) are not
    fields. Numerical fields get `n_bins` quantile bins.
    """
    if not rows:
        raise DataError("cannot infer a schema from zero rows")
    columns = [c for c in rows[0].keys() if c not in reserved]
    for name in static_field_names:
        if name not in columns:
            raise DataError(f"declared static field {name!r} is not a column")
    if label_field is not None and label_field not in columns:
        raise DataError(f"label field {label_field!r} is not a column")

    fields = []
    for col in columns:
        values = [r.get(col) for r in rows]
        present = [v for v in values if not _is_missing(v)]
        if not present:
            raise DataError(f"column {col!r} has no non-missing values")
        numeric = all(_as_number(v) is not None for v in present)
        kind = STATIC if col in static_field_names else DYNAMIC
        dtype = NUMERICAL if numeric else CATEGORICAL
        fields.append(FieldSchema(col, kind, dtype, n_bins if numeric else None))
    return Schema(fields, label_field)


@dataclass(frozen=True)
class Quantizer:
    """Quantile cut points for one numerical field.

    Cuts sit at the nearest-rank empirical quantiles k/n_bins of the fitted
    sample. A value's bin is the count of cuts strictly below it, so bins are
    clamped at both ends and adding a cut equal to the sample maximum could
    never separate any fitted values; such cuts are dropped, which is why
    constant data collapses to a single effective bin.
    """

    field_name: str
    thresholds: tuple[float, ...]
    requested_bins: int

    def __post_init__(self):
        t = self.thresholds
        if any(t[i] >= t[i + 1] for i in range(len(t) - 1)):
            raise DataError(f"quantizer {self.field_name!r}: cuts not strictly ascending")

    @property
    def effective_bins(self) -> int:
        return len(self.thresholds) + 1

    def bin_of(self, x: float) -> int:
        x = _as_number(x)
        if x is None:
            raise DataError(f"quantizer {self.field_name!r}: non-finite value")
        return int(np.searchsorted(self.thresholds, x, side="left"))

    def bin_of_many(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if not np.isfinite(xs).all():
            raise DataError(f"quantizer {self.field_name!r}: non-finite values")
        return np.searchsorted(np.asarray(self.thresholds), xs, side="left")

    def to_json_dict(self) -> dict:
        return {
            "field": self.field_name,
            "thresholds": list(self.thresholds),
            "requested_bins": self.requested_bins,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Quantizer":
        return cls(d["field"], tuple(d["thresholds"]), d["requested_bins"])


def fit_quantizer(values, n_bins: int, field_name: str = "") -> Quantizer:
    """Fit nearest-rank quantile cuts on a non-empty sample."""
    if n_bins < 2:
        raise DataError("n_bins must be >= 2")
    xs = np.asarray(list(values), dtype=np.float64)
    if xs.size == 0:
        raise DataError(f"quantizer {field_name!r}: empty sample")
    if not np.isfinite(xs).all():
        raise DataError(f"quantizer {field_name!r}: non-finite values in sample")
    xs.sort()
    n = xs.size
    ranks = [math.ceil(k * n / n_bins) for k in range(1, n_bins)]
    raw = [float(xs[r - 1]) for r in ranks]
    top = float(xs[-1])
    cuts = sorted({c for c in raw if c < top})
    return Quantizer(field_name, tuple(cuts), n_bins)


class Vocabulary:
    """Global contiguous token id space over per-field local vocabularies.

    Ids 0..2 are the shared special tokens; after those, each field occupies
    one block of ids, fields in schema order, values in first-seen order.
    Unseen values map to [UNK].
    """

    def __init__(self, schema: Schema, tables: dict[str, dict]):
        self.schema = schema
        self.tables = tables
        self._bases: dict[str, int] = {}
        self._decode: dict[int, tuple[str, object]] = {
            PAD_ID: ("special", PAD_TOKEN),
            MASK_ID: ("special", MASK_TOKEN),
            UNK_ID: ("special", UNK_TOKEN),
        }
        next_id = N_SPECIALS
        for f in schema:
            if f.name not in tables:
                raise DataError(f"vocabulary missing table for field {f.name!r}")
            table = tables[f.name]
            self._bases[f.name] = next_id
            for key, gid in table.items():
                if gid != next_id:
                    raise DataError(
                        f"vocabulary ids for field {f.name!r} are not contiguous"
                    )
                self._decode[gid] = (f.name, key)
                next_id += 1
        self.total_size = next_id

    # -- lookups ---------------------------------------------------------

    def lookup(self, field: str, key) -> int:
        """Id of a field-local value key; [UNK] when never seen in training."""
        try:
            table = self.tables[field]
        except KeyError:
            raise DataError(f"field {field!r} is not in the vocabulary") from None
        return table.get(key, UNK_ID)

    def decode(self, gid: int) -> tuple[str, object]:
        """Map an id back to ("special", token) or (field, value key)."""
        try:
            return self._decode[int(gid)]
        except KeyError:
            raise DataError(f"token id {gid} out of range") from None

    def encode(self, tag: str, key) -> int:
        if tag == "special":
            return SPECIAL_TOKENS.index(key)
        return self.lookup(tag, key)

    def field_size(self, field: str) -> int:
        return len(self.tables[field])

    def field_base(self, field: str) -> int:
        return self._bases[field]

    def local_width(self, field: str) -> int:
        """Output width of a prediction head for this field: local vocab plus specials."""
        return self.field_size(field) + N_SPECIALS

    def to_local(self, field: str, gids: np.ndarray) -> np.ndarray:
        """Map global ids to head-local slots: specials keep 0..2, field ids follow."""
        gids = np.asarray(gids)
        base = self._bases[field]
        size = self.field_size(field)
        out = np.where(gids < N_SPECIALS, gids, gids - base + N_SPECIALS)
        bad = (gids >= N_SPECIALS) & ((gids < base) | (gids >= base + size))
        if bad.any():
            raise DataError(f"id outside field {field!r} local vocabulary")
        return out.astype(np.int64)

    # -- persistence -----------------------------------------------------

    def _payload(self) -> dict:
        return {
            "format": 1,
            "specials": list(SPECIAL_TOKENS),
            "schema": self.schema.to_json_dict(),
            "tables": {f: [[k, v] for k, v in t.items()] for f, t in self.tables.items()},
        }

    def digest(self) -> str:
        blob = json.dumps(self._payload(), separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_json_dict(self) -> dict:
        d = self._payload()
        d["digest"] = self.digest()
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "Vocabulary":
        if d.get("format") != 1:
            raise DataError("unknown vocabulary format version")
        schema = Schema.from_json_dict(d["schema"])
        # JSON keeps integer bin keys as ints and categorical keys as strings.
        tables = {f: {k: v for k, v in pairs} for f, pairs in d["tables"].items()}
        vocab = cls(schema, tables)
        stored = d.get("digest")
        if stored is not None and stored != vocab.digest():
            raise DataError("vocabulary digest does not match its contents")
        return vocab


def build_vocab(schema: Schema, quantizers: dict[str, Quantizer], rows: list[dict]) -> Vocabulary:
    """Assign ids over values observed in `rows`.

    Categorical values are keyed by their string form; numerical values by
    their bin index under the field's fitted quantizer. Id assignment is
    deterministic: specials first, then fields in schema order, values in
    first-seen order.
    """
    for f in schema.numerical_fields:
        if f.name not in quantizers:
            raise DataError(f"no fitted quantizer for numerical field {f.name!r}")
    tables: dict[str, dict] = {}
    next_id = N_SPECIALS
    for f in schema:
        table: dict = {}
        if f.dtype == NUMERICAL:
            q = quantizers[f.name]
            for r in rows:
                v = r.get(f.name)
                if _is_missing(v):
                    continue
                key = q.bin_of(v)
                if key not in table:
                    table[key] = next_id
                    next_id += 1
        else:
            for r in rows:
                v = r.get(f.name)
                if _is_missing(v):
                    continue
                key = str(v)
                if key not in table:
                    table[key] = next_id
                    next_id += 1
        if not table:
            raise DataError(f"field {f.name!r} has no observed values")
        tables[f.name] = table
    return Vocabulary(schema, tables)
