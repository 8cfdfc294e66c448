"""Image-quality metrics and paired statistical testing.

PSNR uses a caller-supplied data range (by convention the ground-truth
max - min per volume). SSIM is computed over a full-resolution local
map with a separable 3D Gaussian window (reflect boundary) and the
field-standard constants k1=0.01, k2=0.03. The Wilcoxon signed-rank
test discards zero differences, uses the exact sign-enumeration
distribution up to n=25 (midranks for ties), and a tie- and
continuity-corrected normal approximation beyond.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage, stats

from .errors import InsufficientDataError, ParameterError, ShapeError
from .phantom import PairedSample
from .volume import Volume

EXACT_WILCOXON_MAX_N = 25


def _as_array(v) -> np.ndarray:
    if isinstance(v, Volume):
        return v.data.astype(np.float64)
    return np.asarray(v, dtype=np.float64)


def psnr(a, ref, data_range: float) -> float:
    """10 log10(data_range^2 / MSE); +inf when the inputs are identical."""
    a, ref = _as_array(a), _as_array(ref)
    if a.shape != ref.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {ref.shape}")
    if not data_range > 0:
        raise ParameterError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((a - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_kernel(edge: int, sigma: float) -> np.ndarray:
    x = np.arange(edge, dtype=np.float64) - (edge - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _windowed(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    for axis in range(3):
        x = ndimage.correlate1d(x, kernel, axis=axis, mode="reflect")
    return x


def ssim3d(
    a,
    ref,
    data_range: float,
    window_edge: int = 7,
    window_sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean of the local SSIM map under a 3D Gaussian window."""
    a, ref = _as_array(a), _as_array(ref)
    if a.shape != ref.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {ref.shape}")
    if not data_range > 0:
        raise ParameterError(f"data_range must be positive, got {data_range}")
    if window_edge % 2 == 0 or window_edge < 1:
        raise ParameterError(f"window_edge must be odd and positive, got {window_edge}")
    if any(window_edge > d for d in a.shape):
        raise ShapeError(f"window {window_edge} larger than volume dims {a.shape}")
    kernel = _gaussian_kernel(window_edge, window_sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu1 = _windowed(a, kernel)
    mu2 = _windowed(ref, kernel)
    var1 = _windowed(a * a, kernel) - mu1 * mu1
    var2 = _windowed(ref * ref, kernel) - mu2 * mu2
    cov = _windowed(a * ref, kernel) - mu1 * mu2
    ssim_map = ((2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2)) / (
        (mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2)
    )
    return float(ssim_map.mean())


def _exact_two_sided_p(doubled_ranks: np.ndarray, doubled_stat: int) -> float:
    """Exact p over all 2^n sign assignments via subset-sum counting.

    Ranks are doubled so midranks stay integral. The returned value is
    min(1, 2 * min(P(S <= s), P(S >= s))) for S the negative-rank sum.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    n_assign = 2.0 ** len(doubled_ranks)
    p_le = counts[: doubled_stat + 1].sum() / n_assign
    p_ge = counts[doubled_stat:].sum() / n_assign
    return min(1.0, 2.0 * min(p_le, p_ge))


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> float:
    """Two-sided p-value for paired samples (zero differences discarded)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"paired samples must be equal-length 1D, got {x.shape} vs {y.shape}")
    # equal entries (including matching +inf sentinels) count as zero differences
    d = np.where(x == y, 0.0, x - y)
    d = d[d != 0]
    if np.any(np.isnan(d)):
        raise ParameterError("differences contain NaN")
    n = len(d)
    if n < 5:
        raise InsufficientDataError(
            f"need >= 5 nonzero differences after zero removal, got {n}"
        )
    ranks = stats.rankdata(np.abs(d))
    w_minus = float(ranks[d < 0].sum())
    w_plus = float(ranks[d > 0].sum())
    w = min(w_plus, w_minus)

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        stat2 = int(round(2.0 * w_minus))
        return _exact_two_sided_p(doubled, stat2)

    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    if var <= 0:
        raise InsufficientDataError("all differences tied; variance is zero")
    if w == mu:
        return 1.0
    # continuity correction shifts the statistic half a step toward the mean
    z = (w - mu + 0.5) / math.sqrt(var)
    return min(1.0, 2.0 * float(stats.norm.cdf(z)))


@dataclass
class MetricRow:
    subject: str
    method: str
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    error: Optional[str] = None


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)
    method_stats: dict = field(default_factory=dict)  # method -> metric -> (mean, std)
    p_values: dict = field(default_factory=dict)  # (a, b, metric) -> float | str

    def to_csv(self) -> str:
        lines = ["subject,method,psnr_db,ssim,error"]
        for r in self.rows:
            psnr_s = "" if r.psnr is None else ("inf" if math.isinf(r.psnr) else f"{r.psnr:.6f}")
            ssim_s = "" if r.ssim is None else f"{r.ssim:.6f}"
            lines.append(f"{r.subject},{r.method},{psnr_s},{ssim_s},{r.error or ''}")
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = ["== method summary =="]
        for method, ms in sorted(self.method_stats.items()):
            p = ms["psnr"]
            s = ms["ssim"]
            lines.append(
                f"{method}: PSNR {p[0]:.3f} +/- {p[1]:.3f} dB, SSIM {s[0]:.4f} +/- {s[1]:.4f}"
            )
        lines.append("== pairwise Wilcoxon signed-rank (two-sided) ==")
        for (a, b, metric), p in sorted(self.p_values.items()):
            p_s = f"{p:.5g}" if isinstance(p, float) else str(p)
            lines.append(f"{a} vs {b} [{metric}]: p = {p_s}")
        return "\n".join(lines) + "\n"


def evaluate_suite(
    methods: Sequence[tuple[str, Callable[[Volume], Volume]]],
    testset: Sequence[PairedSample],
    data_range: Optional[float] = None,
    ssim_kwargs: Optional[dict] = None,
) -> MetricsReport:
    """Run every method over every paired test volume and aggregate.

    Method failures are recorded as row-level errors and the suite
    continues. data_range defaults to each ground truth's max - min.
    """
    ssim_kwargs = ssim_kwargs or {}
    report = MetricsReport()
    per_method: dict[str, dict[str, list[float]]] = {}
    subjects = [f"subject_{i:03d}" for i in range(len(testset))]
    for tag, fn in methods:
        scores = per_method.setdefault(tag, {"psnr": [], "ssim": []})
        for subject, sample in zip(subjects, testset):
            gt = sample.x0
            dr = data_range
            if dr is None:
                dr = float(gt.data.max() - gt.data.min())
            try:
                out = fn(sample.y)
                if out.dims != gt.dims:
                    raise ShapeError(f"method output dims {out.dims} != ground truth {gt.dims}")
                row = MetricRow(
                    subject,
                    tag,
                    psnr=psnr(out.data, gt.data, dr),
                    ssim=ssim3d(out.data, gt.data, dr, **ssim_kwargs),
                )
                scores["psnr"].append(row.psnr)
                scores["ssim"].append(row.ssim)
            except Exception as exc:  # noqa: BLE001 - row-level isolation is the contract
                row = MetricRow(subject, tag, error=f"{type(exc).__name__}: {exc}")
            report.rows.append(row)

    report.rows.sort(key=lambda r: (r.method, r.subject))
    for tag, scores in per_method.items():
        report.method_stats[tag] = {
            metric: (float(np.mean(vals)), float(np.std(vals))) if vals else (math.nan, math.nan)
            for metric, vals in scores.items()
        }
    tags = [tag for tag, _ in methods]
    for i, a in enumerate(tags):
        for b in tags[i + 1 :]:
            for metric in ("psnr", "ssim"):
                xa, xb = per_method[a][metric], per_method[b][metric]
                if len(xa) != len(xb) or not xa:
                    report.p_values[(a, b, metric)] = "unavailable: missing rows"
                    continue
                try:
                    report.p_values[(a, b, metric)] = wilcoxon_signed_rank(xa, xb)
                except InsufficientDataError as exc:
                    report.p_values[(a, b, metric)] = f"unavailable: {exc}"
    return report
