"""Multi-seed ablation runs and their summary tables.

Each run trains on the source domains minus a stratified held-out slice,
then records target HTER/AUC on complete and modality-zeroed inputs and the
cross-modal synergy estimate on the held-out source slice.
"""

import csv
import io
import math
from dataclasses import dataclass, asdict

import numpy as np

from .synthdata import apply_protocol, build_benchmark, complete_protocol, holdout_split, zero_modalities
from .theory import estimate_synergy
from .trainer import evaluate, modality_features, run_hash, train_model, with_ablation


SYNERGY_MIN_ROWS = 500


@dataclass
class ArmRecord:
    arm: str
    seed: int
    hter: float
    auc: float
    hter_missing: float
    auc_missing: float
    synergy: float
    config_hash: str

    @property
    def degradation(self):
        return self.hter_missing - self.hter


def run_arm(config, ablation, arm, seed, bench_kwargs, target=3, missing=(1, 2),
            holdout=0.25):
    """One seed of one arm; the benchmark itself is drawn from ``seed`` too."""
    cfg = with_ablation(config, ablation, seed)
    ds = build_benchmark(seed=seed, targets=(target,), **bench_kwargs)
    protocol = complete_protocol(target, ds.config.n_domains)
    rng = np.random.default_rng([seed, 20])
    train, evaluation = apply_protocol(ds, protocol, rng)
    fit, held = holdout_split(train, holdout, rng)
    model, _, rows = train_model(cfg, fit)
    h = run_hash(cfg, protocol.name)
    full = evaluate(model, evaluation, cfg.threshold, protocol.name, h)
    masked = evaluate(model, zero_modalities(evaluation, missing), cfg.threshold,
                      "missing-test", h)
    # the Gaussian estimate needs enough held-out rows; small runs report NaN
    syn = (estimate_synergy(modality_features(model, held)).value
           if len(held) >= SYNERGY_MIN_ROWS else math.nan)
    return ArmRecord(arm, seed, full.hter, full.auc, masked.hter, masked.auc, syn, h)


def run_arms(config, arms, seeds, bench_kwargs=None, log=None, **kwargs):
    records = []
    for seed in seeds:
        for name, ablation in arms.items():
            rec = run_arm(config, ablation, name, seed, bench_kwargs or {}, **kwargs)
            records.append(rec)
            if log:
                log(rec)
    return records


@dataclass
class ArmSummary:
    arm: str
    n: int
    hter_mean: float
    hter_std: float
    auc_mean: float
    auc_std: float
    degradation_mean: float
    synergy_mean: float
    synergy_std: float


def _stats(v):
    v = np.asarray(v, float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def summarize(records):
    by_arm = {}
    for r in records:
        by_arm.setdefault(r.arm, []).append(r)
    out = []
    for arm, rs in by_arm.items():
        h, a, s = _stats([r.hter for r in rs]), _stats([r.auc for r in rs]), _stats([r.synergy for r in rs])
        d = _stats([r.degradation for r in rs])
        out.append(ArmSummary(arm, len(rs), h[0], h[1], a[0], a[1], d[0], s[0], s[1]))
    return out


def pooled_se(a, b):
    """Standard error of ``mean(a) - mean(b)`` from the pooled variance."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = a.size, b.size
    sp2 = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    return math.sqrt(sp2 * (1 / na + 1 / nb))


def metric(records, arm, name):
    return np.array([getattr(r, name) if name != "degradation" else r.degradation
                     for r in records if r.arm == arm])


# ---------------------------------------------------------------- tables

TABLE_COLUMNS = ["arm", "n", "hter_mean", "hter_std", "auc_mean", "auc_std",
                 "degradation_mean", "synergy_mean", "synergy_std"]


def table_csv(summaries):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for s in summaries:
        row = asdict(s)
        writer.writerow([row[c] if c in ("arm", "n") else repr(float(row[c])) for c in TABLE_COLUMNS])
    return buf.getvalue()


def read_table(text):
    """Inverse of :func:`table_csv`."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and list(rows[0]) != TABLE_COLUMNS:
        raise ValueError("not an ablation table")
    return [ArmSummary(r["arm"], int(r["n"]), *(float(r[c]) for c in TABLE_COLUMNS[2:]))
            for r in rows]


def table_text(summaries):
    """Aligned ``mean ± std`` layout, HTER and AUC in percent."""
    lines = [f"{'arm':<22}{'HTER (%)':>18}{'AUC (%)':>18}{'synergy':>16}"]
    for s in summaries:
        lines.append(f"{s.arm:<22}{100 * s.hter_mean:>10.2f} ± {100 * s.hter_std:<5.2f}"
                     f"{100 * s.auc_mean:>10.2f} ± {100 * s.auc_std:<5.2f}"
                     f"{s.synergy_mean:>9.3f} ± {s.synergy_std:<5.3f}")
    return "\n".join(lines) + "\n"


RECORD_COLUMNS = ["arm", "seed", "hter", "auc", "hter_missing", "auc_missing", "synergy", "config_hash"]


def records_csv(records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for r in records:
        writer.writerow([getattr(r, c) for c in RECORD_COLUMNS])
    return buf.getvalue()
