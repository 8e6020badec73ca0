"""Deterministic synthetic sequential-tabular data with planted anomalies.

Each sequence belongs to a static profile (categorical id plus a base
amount); its records carry a normally distributed amount, a merchant code,
a channel, and exponential inter-record gaps. With probability `anomaly_rate`
a sequence's final record is planted as anomalous:

- ``value_only``: the last amount is drawn far from the profile's base, so
  the anomaly is an inconsistency between static and dynamic fields.
- ``time_only``: the last few gaps shrink by a large factor (a burst) while
  every field value is drawn exactly as for normal sequences, so the two
  classes have identical value marginals and only timing separates them.
- ``mixed``: a fair coin picks one of the two plants.

`oracle_score` evaluates the closed-form likelihood ratio of the known
generative rule, an upper-bound reference for any learned detector.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .pipeline import RecordWindow
from .schema import CATEGORICAL, DYNAMIC, NUMERICAL, STATIC, FieldSchema, Schema

RULES = ("value_only", "time_only", "mixed")
CHANNELS = ("swipe", "online", "chip")


@dataclass
class GenSpec:
    n_sequences: int = 2000
    records_per_sequence: int = 10
    n_profiles: int = 4
    profile_base_amounts: tuple[float, ...] = (25.0, 60.0, 120.0, 300.0)
    amount_std: float = 10.0
    n_merchant_codes: int = 8
    gap_mean: float = 60.0
    anomaly_rate: float = 0.1
    rule: str = "mixed"
    seed: int = 0
    burst_factor: float = 100.0
    burst_len: int = 3
    value_shift_sigmas: float = 8.0

    def __post_init__(self):
        self.profile_base_amounts = tuple(self.profile_base_amounts)
        if self.rule not in RULES:
            raise DataError(f"unknown rule {self.rule!r}; pick one of {RULES}")
        if not 0.0 < self.anomaly_rate <= 0.5:
            raise DataError("anomaly_rate must be in (0, 0.5]")
        if self.amount_std <= 0 or self.gap_mean <= 0:
            raise DataError("amount_std and gap_mean must be positive")
        if self.burst_factor <= 1 or self.burst_len < 1:
            raise DataError("burst_factor must exceed 1 and burst_len be >= 1")
        if len(self.profile_base_amounts) != self.n_profiles:
            raise DataError("profile_base_amounts must list one base per profile")
        if self.records_per_sequence <= self.burst_len:
            raise DataError("records_per_sequence must exceed burst_len")
        if self.n_sequences < 1 or self.n_merchant_codes < 1:
            raise DataError("n_sequences and n_merchant_codes must be positive")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["profile_base_amounts"] = list(self.profile_base_amounts)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "GenSpec":
        return cls(**d)


def schema_for(spec: GenSpec, n_bins: int = 32) -> Schema:
    return Schema(
        [
            FieldSchema("profile", STATIC, CATEGORICAL),
            FieldSchema("base_amount", STATIC, NUMERICAL, n_bins=n_bins),
            FieldSchema("amount", DYNAMIC, NUMERICAL, n_bins=n_bins),
            FieldSchema("mcc", DYNAMIC, CATEGORICAL),
            FieldSchema("channel", DYNAMIC, CATEGORICAL),
            FieldSchema("label", DYNAMIC, CATEGORICAL),
        ],
        label_field="label",
    )


def generate_rows(spec: GenSpec) -> tuple[list[dict], list[dict]]:
    """Records plus per-record ground-truth labels, deterministic per seed.

    Per sequence, every field value and gap is drawn before the anomaly
    decision, so in ``time_only`` mode the value arrays of both classes come
    from the identical sampling path and only the gaps are edited.
    """
    records: list[dict] = []
    labels: list[dict] = []
    n = spec.records_per_sequence
    for s in range(spec.n_sequences):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.seed, s))))
        profile = int(rng.integers(spec.n_profiles))
        mu = spec.profile_base_amounts[profile]
        amounts = rng.normal(mu, spec.amount_std, n)
        mcc = rng.integers(spec.n_merchant_codes, size=n)
        channel = rng.integers(len(CHANNELS), size=n)
        gaps = rng.exponential(spec.gap_mean, n - 1)

        anomalous = rng.random() < spec.anomaly_rate
        if anomalous:
            if spec.rule == "mixed":
                time_plant = rng.random() < 0.5
            else:
                time_plant = spec.rule == "time_only"
            if time_plant:
                gaps[-spec.burst_len :] /= spec.burst_factor
            else:
                sign = 1.0 if rng.random() < 0.5 else -1.0
                shift = sign * spec.value_shift_sigmas * spec.amount_std
                amounts[-1] = rng.normal(mu + shift, spec.amount_std)

        times = np.concatenate([[0.0], np.cumsum(gaps)])
        seq_id = f"s{s:06d}"
        for i in range(n):
            lab = int(anomalous and i == n - 1)
            records.append(
                {
                    "seq_id": seq_id,
                    "time": float(times[i]),
                    "profile": f"p{profile}",
                    "base_amount": mu,
                    "amount": float(amounts[i]),
                    "mcc": f"m{int(mcc[i])}",
                    "channel": CHANNELS[int(channel[i])],
                    "label": lab,
                }
            )
            labels.append({"seq_id": seq_id, "record_index": i, "label": lab})
    return records, labels


CSV_COLUMNS = ("seq_id", "time", "profile", "base_amount", "amount", "mcc", "channel", "label")


def write_dataset(spec: GenSpec, out_dir) -> Path:
    """Emit records.csv, labels.csv, the resolved spec, and a matching schema."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, labels = generate_rows(spec)
    with open(out_dir / "records.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r["seq_id"],
                    f"{r['time']:.6f}",
                    r["profile"],
                    f"{r['base_amount']:.2f}",
                    f"{r['amount']:.4f}",
                    r["mcc"],
                    r["channel"],
                    r["label"],
                ]
            )
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("seq_id", "record_index", "label"))
        for r in labels:
            writer.writerow((r["seq_id"], r["record_index"], r["label"]))
    (out_dir / "genspec.resolved.json").write_text(
        json.dumps(spec.to_json_dict(), indent=1) + "\n"
    )
    (out_dir / "schema.json").write_text(
        json.dumps(schema_for(spec).to_json_dict(), indent=1) + "\n"
    )
    return out_dir / "records.csv"


def _log_normal_pdf(x: float, mu: float, std: float) -> float:
    z = (x - mu) / std
    return -0.5 * z * z - math.log(std * math.sqrt(2.0 * math.pi))


def oracle_score(spec: GenSpec, window: RecordWindow) -> float:
    """Log likelihood ratio of "final record planted" vs normal for a window.

    Uses the exact generative densities: a two-sided shifted normal for the
    value plant, shrunken exponential gaps for the time plant, and an even
    mixture of both for the mixed rule. Monotone in the true posterior, so it
    bounds what any detector can achieve on this data.
    """
    if "base_amount" not in window.static_names or "amount" not in window.dynamic_names:
        raise DataError("window does not come from this generator spec")
    real_times = window.times[window.pad_count :]
    if real_times.size <= spec.burst_len:
        raise DataError("window too short for the planted burst rule")
    a_idx = window.dynamic_names.index("amount")
    amount = float(window.dynamic_values[-1][a_idx])
    mu = float(window.static_values[window.static_names.index("base_amount")])

    shift = spec.value_shift_sigmas * spec.amount_std
    lv = (
        np.logaddexp(
            _log_normal_pdf(amount, mu + shift, spec.amount_std),
            _log_normal_pdf(amount, mu - shift, spec.amount_std),
        )
        - math.log(2.0)
        - _log_normal_pdf(amount, mu, spec.amount_std)
    )

    gaps = np.diff(real_times)[-spec.burst_len :]
    lt = float(
        spec.burst_len * math.log(spec.burst_factor)
        - (spec.burst_factor - 1.0) * gaps.sum() / spec.gap_mean
    )

    if spec.rule == "value_only":
        return float(lv)
    if spec.rule == "time_only":
        return lt
    return float(np.logaddexp(lv, lt) - math.log(2.0))
