"""Reference-based quality metrics, corpus reports and Ward clustering of failure modes."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.cluster import hierarchy

from egofilter.audio import AudioClip
from egofilter.dsp import LOG_FLOOR, Spectrogram, alpha_ratio, stft

SI_SDR_CAP_DB = 100.0
SI_SDR_THRESHOLDS_DB = (10.0, 0.0)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB."""
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: estimate {est.shape} vs reference {ref.shape}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("reference is all zeros; SI-SDR undefined")
    s_target = (float(est @ ref) / ref_energy) * ref
    err = est - s_target
    num, den = float(s_target @ s_target), float(err @ err)
    if den == 0.0 or num / den > 10 ** (SI_SDR_CAP_DB / 10):
        return SI_SDR_CAP_DB
    if num == 0.0:
        return -SI_SDR_CAP_DB
    return max(10.0 * math.log10(num / den), -SI_SDR_CAP_DB)


def log_spectral_distance(a, b) -> float:
    """RMS over cells of 20*log10((|a| + eps) / (|b| + eps)), eps = 1e-10."""
    ma = np.abs(a.magnitude if isinstance(a, Spectrogram) else np.asarray(a, dtype=np.float64))
    mb = np.abs(b.magnitude if isinstance(b, Spectrogram) else np.asarray(b, dtype=np.float64))
    if ma.shape != mb.shape:
        raise ValueError(f"shape mismatch: {ma.shape} vs {mb.shape}")
    d = 20.0 * np.log10((ma + LOG_FLOOR) / (mb + LOG_FLOOR))
    return float(np.sqrt(np.mean(d**2)))


@dataclass
class EvalRecord:
    file_id: str
    si_sdr_db: float
    lsd_db: float
    ar_target: float
    snr_db: float
    words_target: int
    wer_percent: float | None = None
    gender_code: int | None = None

    def __post_init__(self):
        for name in ("si_sdr_db", "lsd_db", "ar_target", "snr_db"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{self.file_id}: {name} is not finite")
        if self.wer_percent is not None and not self.wer_percent >= 0:
            raise ValueError(f"{self.file_id}: wer_percent must be >= 0")


@dataclass
class EvalItem:
    """One extraction to score. ``reference`` and ``extracted`` share a timeline via ``start``."""

    file_id: str
    extracted: AudioClip
    reference: AudioClip
    snr_db: float = 0.0
    words_target: int = 0
    wer_percent: float | None = None
    gender_code: int | None = None
    ar_target: float | None = None


def _active_span(x: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(x)
    return x[nz[0] : nz[-1] + 1] if len(nz) else x


def target_alpha_ratio(clip: AudioClip) -> float:
    """Alpha ratio of the active span of ``clip`` at 16-bit integer amplitude.

    The ratio sums dB values, so it depends on absolute level; evaluating at
    PCM scale keeps the dB values positive, where a higher ratio means more
    high-frequency energy.
    """
    span = _active_span(clip.samples) * 32768.0
    return alpha_ratio(stft(AudioClip(span, clip.sample_rate)))


def aligned_reference(extracted: AudioClip, reference: AudioClip) -> np.ndarray:
    """Slice of ``reference`` covering the samples of ``extracted``."""
    off = extracted.start - reference.start
    if off < 0 or off + len(extracted.samples) > len(reference.samples):
        raise ValueError(
            f"length mismatch: extracted covers [{extracted.start}, "
            f"{extracted.start + len(extracted.samples)}) but reference covers "
            f"[{reference.start}, {reference.start + len(reference.samples)})"
        )
    return reference.samples[off : off + len(extracted.samples)]


def score(item: EvalItem) -> EvalRecord:
    ref = aligned_reference(item.extracted, item.reference)
    est = item.extracted.samples
    lsd = log_spectral_distance(stft(AudioClip(est, item.extracted.sample_rate)),
                                stft(AudioClip(ref, item.reference.sample_rate)))
    ar = item.ar_target
    if ar is None:
        ar = target_alpha_ratio(item.reference)
    return EvalRecord(item.file_id, si_sdr(est, ref), lsd, ar, item.snr_db, item.words_target,
                      item.wer_percent, item.gender_code)


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "median": float(np.median(v)), "sd": float(v.std())}


@dataclass
class CorpusReport:
    records: list[EvalRecord]
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def summary(self) -> dict:
        out: dict = {"n_files": len(self.records), "n_errors": len(self.errors)}
        if not self.records:
            return out
        out["si_sdr_db"] = _stats([r.si_sdr_db for r in self.records])
        out["lsd_db"] = _stats([r.lsd_db for r in self.records])
        wers = [r.wer_percent for r in self.records if r.wer_percent is not None]
        if wers:
            out["wer_percent"] = _stats(wers)
        for t in SI_SDR_THRESHOLDS_DB:
            hit = sum(r.si_sdr_db > t for r in self.records)
            out[f"pct_si_sdr_above_{t:g}db"] = 100.0 * hit / len(self.records)
        return out


def evaluate_corpus(items) -> CorpusReport:
    """Score every item; failures become per-file error entries, excluded from the summary."""
    items = list(items)
    if not items:
        raise ValueError("nothing to evaluate: empty corpus")
    records, errors = [], {}
    for item in items:
        try:
            records.append(score(item))
        except ValueError as exc:
            errors[item.file_id] = str(exc)
    return CorpusReport(records, errors)


_REPORT_FIELDS = [f.name for f in fields(EvalRecord)]


def write_report(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_REPORT_FIELDS)
        w.writeheader()
        for r in records:
            row = asdict(r)
            w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v))
                        for k, v in row.items()})


def read_report(path) -> list[EvalRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalRecord(
                file_id=row["file_id"],
                si_sdr_db=float(row["si_sdr_db"]),
                lsd_db=float(row["lsd_db"]),
                ar_target=float(row["ar_target"]),
                snr_db=float(row["snr_db"]),
                words_target=int(row["words_target"]),
                wer_percent=float(row["wer_percent"]) if row.get("wer_percent") else None,
                gender_code=int(row["gender_code"]) if row.get("gender_code") else None,
            ))
    return out


# -- clustering ---------------------------------------------------------------------

@dataclass
class ClusterResult:
    labels: np.ndarray
    features: list[str]
    merges: list[tuple[int, int, float, int]]  # (cluster a, cluster b, height, size), scipy numbering
    means: list[dict]


def feature_matrix(records, use_wer: bool | None = None) -> tuple[np.ndarray, list[str]]:
    """Standardized clustering features; constant columns are dropped with a warning."""
    names = ["words_target", "snr_db", "ar_target"]
    if use_wer is None:
        use_wer = bool(records) and all(r.wer_percent is not None for r in records)
    if use_wer:
        names.append("wer_percent")
    x = np.array([[float(getattr(r, n)) for n in names] for r in records], dtype=np.float64)
    keep = []
    for j, name in enumerate(names):
        if np.ptp(x[:, j]) == 0.0:
            warnings.warn(f"feature column {name!r} is constant and was dropped", stacklevel=2)
        else:
            keep.append(j)
    x = x[:, keep]
    if x.shape[1]:
        x = (x - x.mean(axis=0)) / x.std(axis=0)
    return x, [names[j] for j in keep]


def ward_linkage(x: np.ndarray, k: int = 1):
    """Ward merging on Euclidean distances until ``k`` clusters remain.

    Returns (members per cluster sorted by smallest index, merges), where
    merges are the first ``n - k`` rows of the full dendrogram.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} clusters requested from {n} points")
    if n == 1:
        return [[0]], []
    if x.ndim != 2 or x.shape[1] == 0:
        x = np.zeros((n, 1))
    z = hierarchy.linkage(x, method="ward")
    cut = hierarchy.cut_tree(z, n_clusters=k).ravel()
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(cut):
        groups.setdefault(int(c), []).append(i)
    clusters = sorted(groups.values(), key=lambda m: m[0])
    merges = [(int(a), int(b), float(h), int(size)) for a, b, h, size in z[: n - k]]
    return clusters, merges


def agglomerative_cluster(records, k: int = 4, use_wer: bool | None = None) -> ClusterResult:
    records = list(records)
    n = len(records)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} clusters requested from {n} records")
    x, names = feature_matrix(records, use_wer)
    clusters, merges = ward_linkage(x, k)
    labels = np.empty(n, dtype=int)
    for lab, members in enumerate(clusters):
        labels[members] = lab
    means = []
    for lab, members in enumerate(clusters):
        row = {"cluster": lab, "n": len(members)}
        for name in ["words_target", "snr_db", "ar_target", "si_sdr_db", "lsd_db", "wer_percent"]:
            vals = [getattr(records[i], name) for i in members]
            if all(v is not None for v in vals):
                row[name] = float(np.mean(vals))
        means.append(row)
    return ClusterResult(labels, names, merges, means)
