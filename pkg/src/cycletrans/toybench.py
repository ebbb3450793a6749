"""Synthetic unpaired two-domain phantoms related by a known intensity shift.

Domain X holds soft-edged geometric phantoms; domain Y holds independently
drawn phantoms passed through the shift. The shift acts on intensities only,
so structure is identical between a phantom and its shifted version.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import DatasetSplits, UnpairedDataset, dataset_from_arrays
from .evaluation import (
    bhattacharyya_distance,
    histogram_correlation,
    pooled_histogram,
    ssim,
)

SHIFT_KINDS = ("gamma", "inversion", "piecewise")
TRUTH_FORMAT = "cycletrans-toy-truth-v1"


@dataclass
class ToyDomainSpec:
    image_size: int = 32
    n_images: int = 200
    shift_kind: str = "gamma"
    # gamma: {"gamma": 0.5}; piecewise: {"knots_in": [...], "knots_out": [...]} on [0, 1]
    shift_params: dict = field(default_factory=lambda: {"gamma": 0.5})
    seed: int = 0
    edge_sigma: float = 1.0
    # unit intensity of the dark background; 0 would be a fixed point of every gamma shift
    background: float = 0.1

    def __post_init__(self):
        if self.shift_kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift_kind {self.shift_kind!r}")
        if not 0 <= self.background < 1:
            raise ValueError("background must lie in [0, 1)")
        if self.image_size < 8 or self.n_images < 1:
            raise ValueError("image_size must be >= 8 and n_images >= 1")
        if self.shift_kind == "gamma" and not self.shift_params.get("gamma", 0) > 0:
            raise ValueError("gamma shift needs shift_params['gamma'] > 0")
        if self.shift_kind == "piecewise":
            xin = np.asarray(self.shift_params.get("knots_in", []), float)
            xout = np.asarray(self.shift_params.get("knots_out", []), float)
            if len(xin) < 2 or len(xin) != len(xout) or xin[0] != 0 or xin[-1] != 1:
                raise ValueError("piecewise shift needs matching knots spanning [0, 1]")
            if np.any(np.diff(xin) <= 0) or np.any(np.diff(xout) <= 0):
                raise ValueError("piecewise knots must be strictly increasing")


def phantom(rng: np.random.Generator, size: int, edge_sigma: float = 1.0, background: float = 0.1) -> np.ndarray:
    """2-5 overlapping ellipses/rectangles on a dark background, intensities in [background, 1]."""
    img = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0.25, 0.75, 2) * size
        ry, rx = rng.uniform(0.12, 0.35, 2) * size
        value = rng.uniform(0.2, 1.0)
        if rng.random() < 0.5:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[inside] = value
    img = np.clip(gaussian_filter(img, edge_sigma, mode="constant"), 0.0, 1.0)
    return background + (1.0 - background) * img


def shift_unit(p: np.ndarray, spec: ToyDomainSpec) -> np.ndarray:
    """The domain shift on unit-range intensities."""
    p = np.asarray(p, dtype=np.float64)
    if spec.shift_kind == "gamma":
        return p ** spec.shift_params["gamma"]
    if spec.shift_kind == "inversion":
        return 1.0 - p
    return np.interp(p, spec.shift_params["knots_in"], spec.shift_params["knots_out"])


def unshift_unit(q: np.ndarray, spec: ToyDomainSpec) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if spec.shift_kind == "gamma":
        return q ** (1.0 / spec.shift_params["gamma"])
    if spec.shift_kind == "inversion":
        return 1.0 - q
    return np.interp(q, spec.shift_params["knots_out"], spec.shift_params["knots_in"])


def to_signed(p: np.ndarray) -> np.ndarray:
    return 2.0 * p - 1.0


def to_unit(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, np.float64) + 1.0) / 2.0


def apply_shift(x: np.ndarray, spec: ToyDomainSpec) -> np.ndarray:
    """X-domain image in [-1, 1] -> its Y-domain appearance."""
    return to_signed(shift_unit(to_unit(x), spec))


def invert_shift(y: np.ndarray, spec: ToyDomainSpec) -> np.ndarray:
    return to_signed(unshift_unit(to_unit(y), spec))


def structure_mask(img: np.ndarray, spec: ToyDomainSpec, domain: str, threshold: float = 0.1) -> np.ndarray:
    """Binarize at unit-intensity ``threshold``, mapped through the shift for domain Y."""
    u = to_unit(img)
    if domain == "x":
        return u > threshold
    t = float(shift_unit(np.array(threshold), spec))
    return u < t if spec.shift_kind == "inversion" else u > t


@dataclass
class ToyDataset:
    spec: ToyDomainSpec
    dataset: UnpairedDataset
    # ground truth, for oracle scoring only: X images as they would look in Y,
    # and the unshifted phantoms behind each Y image
    truth_x_to_y: np.ndarray
    truth_y_to_x: np.ndarray

    def x_images(self) -> np.ndarray:
        return np.stack([r.pixels for r in self.dataset.domain_x]).astype(np.float64)

    def y_images(self) -> np.ndarray:
        return np.stack([r.pixels for r in self.dataset.domain_y]).astype(np.float64)


def generate_toy_domains(spec: ToyDomainSpec) -> ToyDataset:
    ss = np.random.SeedSequence(spec.seed)
    sx, sy = ss.spawn(2)
    rx, ry = np.random.default_rng(sx), np.random.default_rng(sy)
    px = [phantom(rx, spec.image_size, spec.edge_sigma, spec.background) for _ in range(spec.n_images)]
    py = [phantom(ry, spec.image_size, spec.edge_sigma, spec.background) for _ in range(spec.n_images)]
    xs = [to_signed(p).astype(np.float32) for p in px]
    ys = [to_signed(shift_unit(p, spec)).astype(np.float32) for p in py]
    ds = dataset_from_arrays(xs, ys, "train", x_prefix="toyx", y_prefix="toyy")
    truth_xy = np.stack([apply_shift(x.astype(np.float64), spec) for x in xs])
    truth_yx = np.stack([to_signed(p) for p in py])
    return ToyDataset(spec, ds, truth_xy, truth_yx)


def truth_document(toy: ToyDataset) -> dict:
    """Ground-truth pairing: the known shift plus which record each truth belongs to."""
    return {
        "format": TRUTH_FORMAT,
        "spec": asdict(toy.spec),
        "x_to_y": [{"x_id": r.source_volume_id, "truth": "shift(x)"} for r in toy.dataset.domain_x],
        "y_to_x": [{"y_id": r.source_volume_id, "truth": "unshift(y)"} for r in toy.dataset.domain_y],
    }


def write_truth(path: str | Path, toy: ToyDataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(truth_document(toy), indent=2, sort_keys=True) + "\n")
    return path


def read_truth(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"truth file not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != TRUTH_FORMAT:
        raise ValueError(f"{path}: not a toy truth file")
    return doc


def oracle_score(translate_fn, x_images: np.ndarray, y_images: np.ndarray, truth: dict | ToyDomainSpec,
                 bins: int = 256) -> dict:
    """Translated-vs-truth and untranslated-vs-truth metrics, side by side, per direction.

    Also reports the distribution-level comparison against the real other
    domain (pooled BD/HC of translated X vs real Y and of real X vs real Y).
    """
    if isinstance(truth, dict):
        spec = ToyDomainSpec(**truth["spec"])
    else:
        spec = truth
    out = {}
    for direction, src, other in (("x_to_y", x_images, y_images), ("y_to_x", y_images, x_images)):
        src = np.asarray(src, np.float64)
        translated = np.asarray(translate_fn(src, direction), np.float64)
        target = (np.stack([apply_shift(s, spec) for s in src]) if direction == "x_to_y"
                  else np.stack([invert_shift(s, spec) for s in src]))
        h_tr = pooled_histogram(translated, bins)
        h_src = pooled_histogram(src, bins)
        h_truth = pooled_histogram(target, bins)
        h_other = pooled_histogram(other, bins)
        out[direction] = {
            "translated_vs_truth": {
                "bd": bhattacharyya_distance(h_tr, h_truth),
                "hc": histogram_correlation(h_tr, h_truth),
                "ssim": float(np.mean([ssim(a, b)[0] for a, b in zip(translated, target)])),
            },
            "untranslated_vs_truth": {
                "bd": bhattacharyya_distance(h_src, h_truth),
                "hc": histogram_correlation(h_src, h_truth),
                "ssim": float(np.mean([ssim(a, b)[0] for a, b in zip(src, target)])),
            },
            "translated_vs_real_target": {
                "bd": bhattacharyya_distance(h_tr, h_other),
                "hc": histogram_correlation(h_tr, h_other),
            },
            "untranslated_vs_real_target": {
                "bd": bhattacharyya_distance(h_src, h_other),
                "hc": histogram_correlation(h_src, h_other),
            },
            "ssim_carryover": float(np.mean([ssim(a, b)[0] for a, b in zip(src, translated)])),
        }
    return out


def toy_splits(spec: ToyDomainSpec, n_test: int) -> tuple[DatasetSplits, ToyDataset]:
    """Generate ``n_images + n_test`` per domain; the last ``n_test`` form the test split."""
    full = generate_toy_domains(dataclasses.replace(spec, n_images=spec.n_images + n_test))
    n = spec.n_images
    ds = full.dataset
    train = UnpairedDataset(ds.domain_x[:n], ds.domain_y[:n], "train")
    test = UnpairedDataset(ds.domain_x[n:], ds.domain_y[n:], "test")
    report = {
        "counts": {"train": train.counts(), "test": test.counts()},
        "volumes": {
            split: {dom: sorted(r.source_volume_id for r in getattr(d, f"domain_{dom}")) for dom in ("x", "y")}
            for split, d in (("train", train), ("test", test))
        },
        "degenerate_excluded": {"x": 0, "y": 0},
        "degenerate_in_test": {"x": 0, "y": 0},
    }
    return DatasetSplits(train, test, report), full


# --------------------------------------------------------------------------- smoke protocol


@dataclass
class SmokeRun:
    seed: int
    lambda2: float
    scores: dict
    gen_total_first: float
    gen_total_last: float
    disc_finite: bool
    seconds: float

    def summary(self) -> dict:
        d = self.scores["x_to_y"]
        return {
            "seed": self.seed,
            "lambda2": self.lambda2,
            "bd_translated": d["translated_vs_real_target"]["bd"],
            "bd_untranslated": d["untranslated_vs_real_target"]["bd"],
            "hc_translated": d["translated_vs_real_target"]["hc"],
            "hc_untranslated": d["untranslated_vs_real_target"]["hc"],
            "ssim_carryover": d["ssim_carryover"],
            "gen_total_first": self.gen_total_first,
            "gen_total_last": self.gen_total_last,
            "disc_finite": self.disc_finite,
            "seconds": self.seconds,
        }


def smoke_run(seed: int, lambda2: float, iterations: int = 200, spec: ToyDomainSpec | None = None,
              n_test: int = 50, base_width: int = 16, lambda1: float = 10.0) -> SmokeRun:
    """Train on a toy set for ``iterations`` steps (batch 1) and score on its held-out split."""
    import time

    from .losses import LossWeights
    from .models import DiscriminatorSpec, GeneratorSpec, make_model, numpy_translator
    from .training import TrainConfig, train_from_scratch

    spec = dataclasses.replace(spec or ToyDomainSpec(), seed=seed)
    if iterations % spec.n_images:
        raise ValueError("iterations must be a multiple of n_images (one epoch visits every X image once)")
    splits, _ = toy_splits(spec, n_test)
    size = spec.image_size
    model = make_model(GeneratorSpec(base_width=base_width, image_size=size),
                       DiscriminatorSpec(base_width=base_width, image_size=size), seed=seed)
    cfg = TrainConfig(epochs=iterations // spec.n_images, freeze_disc_epochs=0,
                      weights=LossWeights(lambda1, lambda2), seed=seed, checkpoint_every=0)
    start = time.perf_counter()
    result = train_from_scratch(model, splits.train, cfg)
    seconds = time.perf_counter() - start
    test_x = np.stack([r.pixels for r in splits.test.domain_x]).astype(np.float64)
    test_y = np.stack([r.pixels for r in splits.test.domain_y]).astype(np.float64)
    scores = oracle_score(numpy_translator(model), test_x, test_y, spec)
    h = result.history
    finite = bool(np.isfinite(h.column("disc_x_loss")).all() and np.isfinite(h.column("disc_y_loss")).all())
    return SmokeRun(seed, lambda2, scores, h.records[0]["gen_total"], h.records[-1]["gen_total"], finite, seconds)


def smoke_experiment(seeds=(0, 1, 2), lambda2_values=(5.0, 0.0), **kwargs) -> dict:
    """All (seed, lambda2) runs plus per-lambda2 medians of the summary metrics."""
    runs = [smoke_run(s, l2, **kwargs) for l2 in lambda2_values for s in seeds]
    medians = {}
    for l2 in lambda2_values:
        sel = [r.summary() for r in runs if r.lambda2 == l2]
        medians[l2] = {k: float(np.median([s[k] for s in sel]))
                       for k in sel[0] if k not in ("seed", "lambda2", "disc_finite")}
    return {"runs": runs, "medians": medians}


def smoke_report_markdown(result: dict) -> str:
    cols = ["seed", "lambda2", "bd_translated", "bd_untranslated", "hc_translated", "hc_untranslated",
            "ssim_carryover", "gen_total_first", "gen_total_last", "seconds"]
    lines = ["# Toy smoke experiment", "",
             "Pooled X->Y comparison on the held-out split; 'untranslated' is real X vs real Y.", "",
             "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in result["runs"]:
        s = r.summary()
        lines.append("| " + " | ".join(f"{s[c]:.4f}" if isinstance(s[c], float) else str(s[c]) for c in cols) + " |")
    lines += ["", "## Medians", ""]
    for l2, med in result["medians"].items():
        lines.append(f"- lambda2 = {l2:g}: BD {med['bd_translated']:.4f} (untranslated {med['bd_untranslated']:.4f}), "
                     f"HC {med['hc_translated']:.4f} (untranslated {med['hc_untranslated']:.4f}), "
                     f"SSIM carry-over {med['ssim_carryover']:.4f}")
    return "\n".join(lines) + "\n"
