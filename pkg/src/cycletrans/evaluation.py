"""SSIM maps, intensity histograms, Bhattacharyya distance, histogram correlation,
and the per-direction translation report."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
BD_EPS = 1e-12

ROW_COLUMNS = ("image_id", "direction", "ssim_cycle", "ssim_carryover", "bd_pooled_flag", "bd", "hc")
METRICS = ("ssim_cycle", "ssim_carryover", "bd", "hc")


class UndefinedCorrelationError(ValueError):
    """Pearson correlation with a zero-variance histogram."""


class BinningMismatchError(ValueError):
    pass


# --------------------------------------------------------------------------- SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = correlate1d(img, kernel, axis=0, mode="reflect")
    return correlate1d(out, kernel, axis=1, mode="reflect")


def ssim(a: np.ndarray, b: np.ndarray, value_range: tuple[float, float] = (-1.0, 1.0),
         window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> tuple[float, np.ndarray]:
    """Mean SSIM and per-pixel SSIM map (same shape as the inputs).

    Inputs are rescaled from ``value_range`` to [0, 1] so the dynamic range
    is 1. Local statistics use a separable Gaussian window with symmetric
    border reflection.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"expected 2D images, got {a.ndim}D")
    lo, hi = value_range
    a = (a - lo) / (hi - lo)
    b = (b - lo) / (hi - lo)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    k = gaussian_window(window, sigma)
    mu_a, mu_b = _filter(a, k), _filter(b, k)
    var_a = _filter(a * a, k) - mu_a * mu_a
    var_b = _filter(b * b, k) - mu_b * mu_b
    cov = _filter(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    smap = num / den
    return float(smap.mean()), smap


# --------------------------------------------------------------------------- histograms


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if len(self.counts) != len(self.bin_edges) - 1:
            raise ValueError("len(counts) must equal len(bin_edges) - 1")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin_edges must be strictly increasing")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    def normalize(self) -> "Histogram":
        total = self.counts.sum()
        if total <= 0:
            raise ValueError("cannot normalize an empty histogram")
        return Histogram(self.bin_edges, self.counts / total, True)

    def __add__(self, other: "Histogram") -> "Histogram":
        _check_binning(self, other)
        if self.normalized or other.normalized:
            raise ValueError("pool raw counts, not normalized histograms")
        return Histogram(self.bin_edges, self.counts + other.counts, False)


def histogram(img: np.ndarray, bins: int = 256, mask: np.ndarray | None = None,
              value_range: tuple[float, float] = (-1.0, 1.0), normalize: bool = False) -> Histogram:
    """Equal-width histogram over ``value_range``; values outside are clipped to the end bins."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    img = np.asarray(img, dtype=np.float64)
    values = img.ravel()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != img.shape:
            raise ValueError(f"mask shape {mask.shape} != image shape {img.shape}")
        values = img[mask]
        if values.size == 0:
            raise ValueError("mask selects no pixels")
    lo, hi = value_range
    counts, edges = np.histogram(np.clip(values, lo, hi), bins=bins, range=(lo, hi))
    h = Histogram(edges, counts.astype(np.float64), False)
    return h.normalize() if normalize else h


def pooled_histogram(images, bins: int = 256, mask_fn: Callable | None = None) -> Histogram:
    total = None
    for img in images:
        h = histogram(img, bins, mask_fn(img) if mask_fn else None)
        total = h if total is None else total + h
    if total is None:
        raise ValueError("no images to pool")
    return total


def _check_binning(p: Histogram, q: Histogram) -> None:
    if p.bin_edges.shape != q.bin_edges.shape or not np.array_equal(p.bin_edges, q.bin_edges):
        raise BinningMismatchError("histograms use different binning")


def _as_normalized(h: Histogram) -> np.ndarray:
    return h.counts if h.normalized else h.normalize().counts


def bhattacharyya_coefficient(p: Histogram, q: Histogram) -> float:
    _check_binning(p, q)
    return float(np.sum(np.sqrt(_as_normalized(p) * _as_normalized(q))))


def bhattacharyya_distance(p: Histogram, q: Histogram, eps: float = BD_EPS) -> float:
    """-ln(sum_i sqrt(p_i q_i)) with the coefficient clamped to [eps, 1]."""
    bc = bhattacharyya_coefficient(p, q)
    return -math.log(min(max(bc, eps), 1.0)) + 0.0


def bd_is_clamped(p: Histogram, q: Histogram, eps: float = BD_EPS) -> bool:
    return bhattacharyya_coefficient(p, q) < eps


def histogram_correlation(p: Histogram, q: Histogram) -> float:
    """Pearson correlation of the two count vectors."""
    _check_binning(p, q)
    a = p.counts - p.counts.mean()
    b = q.counts - q.counts.mean()
    sa, sb = float(np.sum(a * a)), float(np.sum(b * b))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("histogram correlation undefined: zero-variance histogram")
    r = float(np.sum(a * b)) / math.sqrt(sa * sb)
    return min(1.0, max(-1.0, r))


# --------------------------------------------------------------------------- reports


@dataclass
class EvalConfig:
    bins: int = 256
    # pixels <= mask_threshold are background; None disables masking
    mask_threshold: float | None = None
    ssim_window: int = SSIM_WINDOW
    ssim_sigma: float = SSIM_SIGMA
    panel_count: int = 3
    method_name: str = "Proposed GAN"


@dataclass
class MetricsReport:
    rows: list[dict]
    aggregates: dict
    tables: dict
    ssim_maps: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: str | None = None


def aggregate_rows(rows: list[dict]) -> dict:
    """mean / median / std per metric per direction (population std)."""
    out: dict = {}
    for direction in sorted({r["direction"] for r in rows}):
        sel = [r for r in rows if r["direction"] == direction]
        out[direction] = {}
        for m in METRICS:
            v = np.array([float(r[m]) for r in sel])
            out[direction][m] = {"mean": float(v.mean()), "median": float(np.median(v)), "std": float(v.std())}
    return out


def _labels(direction: str, domain_names: tuple[str, str]) -> tuple[str, str]:
    nx, ny = domain_names
    return (nx, ny) if direction == "x_to_y" else (ny, nx)


def evaluate_translation(translate_fn: Callable[[np.ndarray, str], np.ndarray], test_x: list[np.ndarray],
                         test_y: list[np.ndarray], config: EvalConfig | None = None,
                         ids_x: list[str] | None = None, ids_y: list[str] | None = None,
                         domain_names: tuple[str, str] = ("X", "Y"), manifest: str | None = None) -> MetricsReport:
    """Score a translator on both test domains.

    ``translate_fn(batch, direction)`` maps a (N, H, W) array to the other
    domain. Per source slice: SSIM against its cycle reconstruction and
    against its translation, BD/HC of its translation's histogram against
    the pooled real target-domain histogram. Tables pool the histograms of
    all translations per direction.
    """
    config = config or EvalConfig()
    if not len(test_x) or not len(test_y):
        raise ValueError("empty test set")
    ids_x = ids_x or [f"x{i:05d}" for i in range(len(test_x))]
    ids_y = ids_y or [f"y{i:05d}" for i in range(len(test_y))]
    mask_fn = None
    if config.mask_threshold is not None:
        thr = config.mask_threshold
        mask_fn = lambda img: np.asarray(img) > thr  # noqa: E731

    real = {"x": [np.asarray(a, np.float64) for a in test_x], "y": [np.asarray(a, np.float64) for a in test_y]}
    pooled_real = {d: pooled_histogram(real[d], config.bins, mask_fn) for d in ("x", "y")}

    rows, maps, translated_all = [], {}, {}
    for direction, src, tgt, ids in (("x_to_y", "x", "y", ids_x), ("y_to_x", "y", "x", ids_y)):
        back = "y_to_x" if direction == "x_to_y" else "x_to_y"
        batch = np.stack(real[src])
        translated = np.asarray(translate_fn(batch, direction), dtype=np.float64)
        recon = np.asarray(translate_fn(translated, back), dtype=np.float64)
        translated_all[direction] = translated
        for i, image_id in enumerate(ids):
            s_cyc, _ = ssim(batch[i], recon[i], window=config.ssim_window, sigma=config.ssim_sigma)
            s_car, smap = ssim(batch[i], translated[i], window=config.ssim_window, sigma=config.ssim_sigma)
            h = histogram(translated[i], config.bins, mask_fn(translated[i]) if mask_fn else None)
            rows.append({
                "image_id": image_id,
                "direction": direction,
                "ssim_cycle": s_cyc,
                "ssim_carryover": s_car,
                "bd_pooled_flag": 0,
                "bd": bhattacharyya_distance(h, pooled_real[tgt]),
                "hc": histogram_correlation(h, pooled_real[tgt]),
            })
            maps[f"{direction}/{image_id}"] = smap

    tables = {}
    for direction, src, tgt in (("x_to_y", "x", "y"), ("y_to_x", "y", "x")):
        ls, lt = _labels(direction, domain_names)
        pooled_tr = pooled_histogram(translated_all[direction], config.bins, mask_fn)
        entries = [
            (f"No Translation {domain_names[0]} vs {domain_names[0]}", pooled_real["x"], pooled_real["x"]),
            (f"No Translation {domain_names[1]} vs {domain_names[1]}", pooled_real["y"], pooled_real["y"]),
            (f"No Translation {lt} vs {ls}", pooled_real[tgt], pooled_real[src]),
            (config.method_name, pooled_real[tgt], pooled_tr),
        ]
        sel = [r for r in rows if r["direction"] == direction]
        tables[direction] = {
            "title": f"{lt} vs translated {lt} (from {ls})",
            "rows": [
                {"method": name, "bd": bhattacharyya_distance(p, q), "hc": histogram_correlation(p, q),
                 "bd_clamped": bd_is_clamped(p, q)}
                for name, p, q in entries
            ],
            "per_image_mean": {"bd": float(np.mean([r["bd"] for r in sel])),
                               "hc": float(np.mean([r["hc"] for r in sel]))},
        }
    return MetricsReport(rows, aggregate_rows(rows), tables, maps, manifest)


def write_rows_csv(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ROW_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in ROW_COLUMNS])
    return path


def read_rows_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != ROW_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({
                "image_id": row["image_id"],
                "direction": row["direction"],
                "ssim_cycle": float(row["ssim_cycle"]),
                "ssim_carryover": float(row["ssim_carryover"]),
                "bd_pooled_flag": int(row["bd_pooled_flag"]),
                "bd": float(row["bd"]),
                "hc": float(row["hc"]),
            })
    return rows


def tables_markdown(report: MetricsReport) -> str:
    lines = []
    for direction, table in report.tables.items():
        lines += [f"### {table['title']}", "",
                  "| Method | Bhattacharyya distance | Histogram correlation |",
                  "|---|---|---|"]
        for r in table["rows"]:
            flag = " (clamped)" if r["bd_clamped"] else ""
            lines.append(f"| {r['method']} | {r['bd']:.3f}{flag} | {r['hc']:.3f} |")
        lines.append("")
    lines += ["### Per-image aggregates", "",
              "| Direction | Metric | Mean | Median | Std |", "|---|---|---|---|---|"]
    for direction, metrics in report.aggregates.items():
        for m, agg in metrics.items():
            lines.append(f"| {direction} | {m} | {agg['mean']!r} | {agg['median']!r} | {agg['std']!r} |")
    return "\n".join(lines) + "\n"


def parse_aggregates_markdown(text: str) -> dict:
    """Inverse of the aggregate section of ``tables_markdown``."""
    out: dict = {}
    section = text.split("### Per-image aggregates", 1)[1]
    for line in section.splitlines():
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if len(cells) != 5 or cells[0] in ("Direction", "---"):
            continue
        direction, metric, mean, median, std = cells
        out.setdefault(direction, {})[metric] = {"mean": float(mean), "median": float(median), "std": float(std)}
    return out


def write_tables(directory: str | Path, report: MetricsReport) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    md = directory / "tables.md"
    md.write_text(tables_markdown(report))
    paths = [md]
    for direction, table in report.tables.items():
        p = directory / f"table_{direction}.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("Method", "Bhattacharyya distance", "Histogram correlation"))
            for r in table["rows"]:
                w.writerow((r["method"], repr(r["bd"]), repr(r["hc"])))
        paths.append(p)
    return paths
