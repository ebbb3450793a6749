"""Volume ingestion, slicing, slice preprocessing and unpaired datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}
NORMALIZATIONS = ("minmax", "percentile")
DEGENERATE_TOL = 1e-8


class LoadError(Exception):
    pass


class VolumeNotFoundError(LoadError, FileNotFoundError):
    pass


class UnknownFormatError(LoadError):
    pass


class CorruptVolumeError(LoadError):
    pass


class NonFiniteVoxelError(LoadError):
    pass


class DatasetConfigError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality_tag: str = ""
    volume_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be 3D with all dimensions >= 1, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        check_finite(self.voxels, self.volume_id or "<volume>")


def check_finite(voxels: np.ndarray, name: str) -> None:
    bad = ~np.isfinite(voxels)
    if bad.any():
        coords = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteVoxelError(
            f"{name}: non-finite voxel {voxels[coords]} at {coords} ({int(bad.sum())} total)"
        )


@dataclass
class SliceRecord:
    pixels: np.ndarray
    source_volume_id: str
    axis: str
    index: int
    degenerate: bool = False

    @property
    def key(self) -> str:
        return f"{self.source_volume_id}:{self.axis}:{self.index}"


@dataclass
class UnpairedDataset:
    domain_x: list[SliceRecord]
    domain_y: list[SliceRecord]
    split: str = "train"

    def volume_ids(self) -> set[str]:
        return {r.source_volume_id for r in self.domain_x + self.domain_y}

    def counts(self) -> dict[str, int]:
        return {"x": len(self.domain_x), "y": len(self.domain_y)}


# --------------------------------------------------------------------------- loading


def _volume_id(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii", ".npy"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def load_volume(path: str | Path, modality_tag: str = "") -> Volume:
    """Read a NIfTI file (.nii/.nii.gz) or a directory of 2D PNG slices.

    PNG slices are sorted by filename and stacked along the first axis;
    spacing defaults to 1 mm.
    """
    path = Path(path)
    if not path.exists():
        raise VolumeNotFoundError(f"not found: {path}")
    vid = _volume_id(path)
    if path.is_dir():
        voxels, spacing = _read_png_dir(path)
    elif path.name.endswith((".nii", ".nii.gz")):
        voxels, spacing = _read_nifti(path)
    else:
        raise UnknownFormatError(f"unrecognized volume format: {path}")
    check_finite(voxels, str(path))
    return Volume(voxels=voxels, spacing=spacing, modality_tag=modality_tag, volume_id=vid)


def _read_nifti(path: Path):
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
        zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    except Exception as exc:
        raise CorruptVolumeError(f"corrupt NIfTI file {path}: {exc}") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise CorruptVolumeError(f"{path}: expected a 3D volume, got shape {data.shape}")
    zooms = tuple(z if z > 0 else 1.0 for z in zooms)
    return data, zooms


def _read_png_dir(path: Path):
    from PIL import Image, UnidentifiedImageError

    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise UnknownFormatError(f"directory contains no PNG slices: {path}")
    slices = []
    for f in files:
        try:
            with Image.open(f) as im:
                slices.append(np.array(im))
        except (UnidentifiedImageError, OSError) as exc:
            raise CorruptVolumeError(f"corrupt PNG slice {f}: {exc}") from exc
    shapes = {s.shape for s in slices}
    if len(shapes) != 1 or slices[0].ndim != 2:
        raise CorruptVolumeError(f"{path}: slices must be 2D grayscale of one shape, got {shapes}")
    return np.stack(slices, axis=0), (1.0, 1.0, 1.0)


def save_nifti(path: str | Path, voxels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    import nibabel as nib

    img = nib.Nifti1Image(np.asarray(voxels), np.diag([*spacing, 1.0]))
    img.header.set_zooms(tuple(spacing))
    nib.save(img, str(path))


def save_png_slices(directory: str | Path, slices: Sequence[np.ndarray], prefix: str = "slice") -> list[Path]:
    """Write uint16 PNGs (one per slice); float inputs in [-1, 1] are rescaled to [0, 65535]."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for i, s in enumerate(slices):
        s = np.asarray(s)
        if s.dtype != np.uint16:
            s = to_uint16(s)
        p = directory / f"{prefix}_{i:04d}.png"
        Image.fromarray(s).save(p)
        out.append(p)
    return out


def to_uint16(img: np.ndarray) -> np.ndarray:
    return np.round((np.clip(img, -1, 1) + 1) / 2 * 65535).astype(np.uint16)


# --------------------------------------------------------------------------- slicing


def slice_volume(v: Volume, axis: str, keep_range: tuple[int, int] | None = None) -> list[np.ndarray]:
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; expected one of {sorted(AXES)}")
    ax = AXES[axis]
    n = v.voxels.shape[ax]
    start, stop = (0, n) if keep_range is None else keep_range
    start, stop = max(start, 0), min(stop, n)
    if stop <= start:
        raise ValueError(f"empty keep_range {keep_range} for axis {axis} with extent {n}")
    return [np.take(v.voxels, i, axis=ax) for i in range(start, stop)]


def stack_slices(slices: Sequence[np.ndarray], axis: str) -> np.ndarray:
    return np.stack(slices, axis=AXES[axis])


def percentile_bounds(voxels: np.ndarray, low: float = 1.0, high: float = 99.0) -> tuple[float, float]:
    lo, hi = np.percentile(voxels, [low, high])
    return float(lo), float(hi)


def pad_and_center_crop(raw: np.ndarray, crop_size: int) -> np.ndarray:
    """Zero-pad each axis up to crop_size (content centered), then center-crop."""
    raw = np.asarray(raw, dtype=np.float64)
    h, w = raw.shape
    ph, pw = max(crop_size - h, 0), max(crop_size - w, 0)
    if ph or pw:
        raw = np.pad(raw, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
        h, w = raw.shape
    top, left = (h - crop_size) // 2, (w - crop_size) // 2
    return raw[top: top + crop_size, left: left + crop_size]


def preprocess_slice(raw: np.ndarray, crop_size: int = 144, normalization: str = "minmax",
                     bounds: tuple[float, float] | None = None) -> tuple[np.ndarray, bool]:
    """Pad/crop to ``crop_size`` and map intensities to [-1, 1].

    ``minmax`` uses the slice's own range; ``percentile`` needs per-volume
    ``bounds`` (clipped first). Returns ``(pixels, degenerate)``; a constant
    slice maps to all -1 and is flagged degenerate.
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {raw.shape}")
    img = pad_and_center_crop(raw, crop_size)
    if normalization == "minmax":
        lo, hi = float(img.min()), float(img.max())
    else:
        if bounds is None:
            raise ValueError("percentile normalization needs per-volume bounds")
        lo, hi = bounds
        img = np.clip(img, lo, hi)
    span = hi - lo
    scale = max(1.0, abs(lo), abs(hi))
    if span <= DEGENERATE_TOL * scale or float(img.max() - img.min()) <= DEGENERATE_TOL * scale:
        return np.full((crop_size, crop_size), -1.0, dtype=np.float32), True
    out = (img - lo) / span * 2.0 - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32), False


# --------------------------------------------------------------------------- datasets


@dataclass
class DataConfig:
    x_paths: list[str] = field(default_factory=list)
    y_paths: list[str] = field(default_factory=list)
    axes: list[str] = field(default_factory=lambda: ["axial", "coronal", "sagittal"])
    keep_range: list[int] | None = None
    crop_size: int = 144
    normalization: str = "percentile"
    percentiles: list[float] = field(default_factory=lambda: [1.0, 99.0])
    test_fraction: float = 0.2
    drop_degenerate: bool = True
    seed: int = 0

    def __post_init__(self):
        for a in self.axes:
            if a not in AXES:
                raise DatasetConfigError(f"unknown axis {a!r}")
        if self.normalization not in NORMALIZATIONS:
            raise DatasetConfigError(f"unknown normalization {self.normalization!r}")
        if not 0 <= self.test_fraction < 1:
            raise DatasetConfigError("test_fraction must be in [0, 1)")


@dataclass
class DatasetSplits:
    train: UnpairedDataset
    test: UnpairedDataset
    report: dict


def volume_records(v: Volume, config: DataConfig) -> list[SliceRecord]:
    bounds = percentile_bounds(v.voxels, *config.percentiles) if config.normalization == "percentile" else None
    keep = tuple(config.keep_range) if config.keep_range is not None else None
    records = []
    for axis in config.axes:
        start = keep[0] if keep else 0
        for offset, raw in enumerate(slice_volume(v, axis, keep)):
            pixels, degenerate = preprocess_slice(raw, config.crop_size, config.normalization, bounds)
            records.append(SliceRecord(pixels, v.volume_id, axis, max(start, 0) + offset, degenerate))
    return records


def _split_ids(ids: list[str], fraction: float, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_test = int(round(len(ids) * fraction))
    if fraction > 0 and len(ids) >= 2:
        n_test = min(max(n_test, 1), len(ids) - 1)
    return sorted(order[n_test:]), sorted(order[:n_test])


def build_dataset(volumes_x: Sequence[Volume], volumes_y: Sequence[Volume], config: DataConfig) -> DatasetSplits:
    """Slice, normalize and split both domains by source volume."""
    if not volumes_x or not volumes_y:
        raise DatasetConfigError("need at least one volume per domain")
    ids_x = [v.volume_id for v in volumes_x]
    ids_y = [v.volume_id for v in volumes_y]
    for ids, dom in ((ids_x, "x"), (ids_y, "y")):
        if len(set(ids)) != len(ids) or any(not i for i in ids):
            raise DatasetConfigError(f"domain {dom}: volume ids must be unique and non-empty")
    shared = sorted(set(ids_x) & set(ids_y))
    if shared:
        raise DatasetConfigError(f"volumes appear in both domains: {shared}")

    rng = np.random.default_rng(config.seed)
    splits = {"train": {"x": [], "y": []}, "test": {"x": [], "y": []}}
    split_ids = {"train": {}, "test": {}}
    excluded = {"x": 0, "y": 0}
    for dom, vols in (("x", volumes_x), ("y", volumes_y)):
        by_id = {v.volume_id: v for v in vols}
        train_ids, test_ids = _split_ids(sorted(by_id), config.test_fraction, rng)
        for split, ids in (("train", train_ids), ("test", test_ids)):
            split_ids[split][dom] = ids
            for vid in ids:
                recs = volume_records(by_id[vid], config)
                if split == "train" and config.drop_degenerate:
                    excluded[dom] += sum(r.degenerate for r in recs)
                    recs = [r for r in recs if not r.degenerate]
                splits[split][dom].extend(recs)

    train = UnpairedDataset(splits["train"]["x"], splits["train"]["y"], "train")
    test = UnpairedDataset(splits["test"]["x"], splits["test"]["y"], "test")
    report = {
        "counts": {"train": train.counts(), "test": test.counts()},
        "volumes": split_ids,
        "degenerate_excluded": excluded,
        "degenerate_in_test": {
            "x": sum(r.degenerate for r in test.domain_x),
            "y": sum(r.degenerate for r in test.domain_y),
        },
    }
    return DatasetSplits(train, test, report)


def unpaired_sampler(dataset: UnpairedDataset, seed: int, epoch: int) -> Iterator[tuple[SliceRecord, SliceRecord]]:
    """One epoch: every x once in shuffled order; y from an independent shuffle, wrapping around."""
    nx, ny = len(dataset.domain_x), len(dataset.domain_y)
    if nx == 0 or ny == 0:
        raise ValueError("both domains must be non-empty")
    rng = np.random.default_rng([seed, epoch])
    perm_x = rng.permutation(nx)
    perm_y = rng.permutation(ny)
    for i, ix in enumerate(perm_x):
        yield dataset.domain_x[ix], dataset.domain_y[perm_y[i % ny]]


# --------------------------------------------------------------------------- persistence

MANIFEST_NAME = "manifest.json"


def _records_to_npz(path: Path, records: list[SliceRecord], crop_size: int) -> None:
    pixels = (np.stack([r.pixels for r in records]).astype(np.float32) if records
              else np.zeros((0, crop_size, crop_size), np.float32))
    np.savez(
        path,
        pixels=pixels,
        volume_id=np.array([r.source_volume_id for r in records], dtype=str),
        axis=np.array([r.axis for r in records], dtype=str),
        index=np.array([r.index for r in records], dtype=np.int64),
        degenerate=np.array([r.degenerate for r in records], dtype=bool),
    )


def _records_from_npz(path: Path) -> list[SliceRecord]:
    with np.load(path) as z:
        return [
            SliceRecord(z["pixels"][i], str(z["volume_id"][i]), str(z["axis"][i]),
                        int(z["index"][i]), bool(z["degenerate"][i]))
            for i in range(len(z["pixels"]))
        ]


def manifest_dict(splits: DatasetSplits, config: DataConfig, extra: dict | None = None) -> dict:
    m = {
        "format": "cycletrans-dataset-v1",
        "seed": config.seed,
        "axes": list(config.axes),
        "normalization": config.normalization,
        "crop_size": config.crop_size,
        "percentiles": list(config.percentiles),
        "keep_range": config.keep_range,
        "drop_degenerate": config.drop_degenerate,
        "splits": {
            split: {
                "volumes": splits.report["volumes"][split],
                "slices": splits.report["counts"][split],
                "files": {dom: f"{split}_{dom}.npz" for dom in ("x", "y")},
            }
            for split in ("train", "test")
        },
        "degenerate_excluded": splits.report["degenerate_excluded"],
        "degenerate_in_test": splits.report["degenerate_in_test"],
    }
    if extra:
        m.update(extra)
    return m


def dumps_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def save_dataset(directory: str | Path, splits: DatasetSplits, config: DataConfig,
                 extra: dict | None = None) -> Path:
    """Write split npz files and the JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        ds = getattr(splits, split)
        _records_to_npz(directory / f"{split}_x.npz", ds.domain_x, config.crop_size)
        _records_to_npz(directory / f"{split}_y.npz", ds.domain_y, config.crop_size)
    path = directory / MANIFEST_NAME
    path.write_text(dumps_manifest(manifest_dict(splits, config, extra)))
    return path


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return json.loads(path.read_text())


def load_split(directory: str | Path, split: str) -> UnpairedDataset:
    directory = Path(directory)
    manifest = load_manifest(directory)
    if split not in manifest["splits"]:
        raise KeyError(f"manifest has no split {split!r}")
    files = manifest["splits"][split]["files"]
    px, py = directory / files["x"], directory / files["y"]
    for p in (px, py):
        if not p.is_file():
            raise FileNotFoundError(f"missing split file {p}")
    return UnpairedDataset(_records_from_npz(px), _records_from_npz(py), split)


def dataset_from_arrays(xs: Sequence[np.ndarray], ys: Sequence[np.ndarray], split: str = "train",
                        x_prefix: str = "x", y_prefix: str = "y") -> UnpairedDataset:
    """Wrap already-normalized 2D arrays as records, one pseudo-volume per image."""
    return UnpairedDataset(
        [SliceRecord(np.asarray(a, np.float32), f"{x_prefix}{i:05d}", "axial", 0) for i, a in enumerate(xs)],
        [SliceRecord(np.asarray(a, np.float32), f"{y_prefix}{i:05d}", "axial", 0) for i, a in enumerate(ys)],
        split,
    )

