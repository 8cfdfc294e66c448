"""Phantom dataset generation and loading.

A dataset directory holds raw (activity-unit) VNVOL1 volumes in four
splits plus a manifest recording the seeds, split file lists, dose
settings, and the dataset-wide normalization constant:

    manifest.json
    pretrain/clean_000.vnvol ...
    finetune/pair_000_full.vnvol, pair_000_low.vnvol, ...
    val/..., test/...

Volumes are generated with per-item seeds derived from the master seed,
so the same seed always produces a byte-identical dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataConfig
from .errors import ConfigError, DataError
from .phantom import PairedSample, generate_phantom, sample_phantom_spec, simulate_low_dose
from .seeding import derive_seed, numpy_generator
from .volume import Volume, load_volume, normalize, save_volume

MANIFEST_NAME = "manifest.json"
PAIR_SPLITS = ("finetune", "val", "test")


@dataclass
class Dataset:
    root: Path
    manifest: dict

    @property
    def vmax(self) -> float:
        return float(self.manifest["norm_vmax"])

    @property
    def dose_fraction(self) -> float:
        return float(self.manifest["dose_fraction"])

    def pretrain_volumes(self, normalized: bool = True) -> list[Volume]:
        out = []
        for name in self.manifest["splits"]["pretrain"]:
            v = load_volume(self.root / name)
            out.append(normalize(v, self.vmax) if normalized else v)
        return out

    def pairs(self, split: str, normalized: bool = True) -> list[PairedSample]:
        if split not in PAIR_SPLITS:
            raise DataError(f"unknown paired split {split!r}")
        out = []
        for entry in self.manifest["splits"][split]:
            full = load_volume(self.root / entry["full"])
            low = load_volume(self.root / entry["low"])
            if normalized:
                full = normalize(full, self.vmax)
                low = normalize(low, self.vmax)
            out.append(PairedSample(full, low, self.dose_fraction))
        return out

    def all_files(self) -> list[Path]:
        files = [self.root / MANIFEST_NAME]
        files += [self.root / n for n in self.manifest["splits"]["pretrain"]]
        for split in PAIR_SPLITS:
            for entry in self.manifest["splits"][split]:
                files += [self.root / entry["full"], self.root / entry["low"]]
        return files


def generate_dataset(cfg: DataConfig, seed: int, out_dir, force: bool = False) -> Dataset:
    """Write a full phantom dataset; refuses non-empty targets without force."""
    counts = {
        "pretrain": cfg.pretrain_count,
        "finetune": cfg.finetune_pairs,
        "val": cfg.val_pairs,
        "test": cfg.test_pairs,
    }
    for split, n in counts.items():
        if n < 1:
            raise ConfigError(f"split {split!r} requests {n} volumes; every split needs >= 1")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"output directory {out_dir} is not empty (use --force to overwrite)")
    dims = tuple(int(d) for d in cfg.dims)
    spacing = tuple(float(s) for s in cfg.spacing)

    def make_clean(split: str, i: int) -> Volume:
        spec = sample_phantom_spec(
            dims,
            numpy_generator(seed, "phantom-spec", split, i),
            spacing=spacing,
            background_level=cfg.background_level,
            smoothing_mm=cfg.smoothing_mm,
        )
        return generate_phantom(spec, derive_seed(seed, "phantom", split, i))

    cleans: dict[str, list[Volume]] = {
        split: [make_clean(split, i) for i in range(counts[split])] for split in counts
    }
    vmax = cfg.norm_margin * max(
        float(v.data.max()) for vols in cleans.values() for v in vols
    )

    splits: dict[str, list] = {"pretrain": []}
    (out_dir / "pretrain").mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(cleans["pretrain"]):
        name = f"pretrain/clean_{i:03d}.vnvol"
        save_volume(v, out_dir / name)
        splits["pretrain"].append(name)
    for split in PAIR_SPLITS:
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for i, v in enumerate(cleans[split]):
            low = simulate_low_dose(
                v, cfg.dose_fraction, cfg.counts_per_unit, derive_seed(seed, "dose", split, i)
            )
            full_name = f"{split}/pair_{i:03d}_full.vnvol"
            low_name = f"{split}/pair_{i:03d}_low.vnvol"
            save_volume(v, out_dir / full_name)
            save_volume(low, out_dir / low_name)
            entries.append({"full": full_name, "low": low_name})
        splits[split] = entries

    manifest = {
        "seed": int(seed),
        "dims": list(dims),
        "spacing": list(spacing),
        "dose_fraction": cfg.dose_fraction,
        "counts_per_unit": cfg.counts_per_unit,
        "background_level": cfg.background_level,
        "smoothing_mm": cfg.smoothing_mm,
        "norm_margin": cfg.norm_margin,
        "norm_vmax": float(vmax),
        "splits": splits,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return Dataset(out_dir, manifest)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"{root} is not a dataset directory (missing {MANIFEST_NAME})")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path} is corrupt: {exc}") from exc
    for key in ("norm_vmax", "dose_fraction", "splits"):
        if key not in manifest:
            raise DataError(f"{manifest_path} is missing required key {key!r}")
    return Dataset(root, manifest)
