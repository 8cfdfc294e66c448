"""Slice-montage rendering to binary portable graymaps (PGM P5).

For visual method comparison the evaluator renders the central axial,
coronal, and sagittal slices of each volume side by side, one row per
view, windowed by the montage's global min/max. The window is recorded
in a JSON sidecar so intensities remain interpretable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .volume import Volume


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ParameterError("PGM writer expects a 2D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ParameterError(f"{path}: not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def _central_slices(v: Volume) -> list[np.ndarray]:
    nx, ny, nz = v.dims
    return [
        v.data[:, :, nz // 2],  # axial
        v.data[:, ny // 2, :],  # coronal
        v.data[nx // 2, :, :],  # sagittal
    ]


def render_montage(path, columns: list[tuple[str, Volume]], gap: int = 2):
    """Render central slices (rows: axial/coronal/sagittal) per labelled volume.

    Returns the sidecar dict, which is also written next to the image.
    """
    if not columns:
        raise ParameterError("montage needs at least one volume")
    dims = columns[0][1].dims
    for _, vol in columns:
        if vol.dims != dims:
            raise ParameterError("all montage volumes must share dims")
    slices = [_central_slices(vol) for _, vol in columns]
    vmin = float(min(s.min() for col in slices for s in col))
    vmax = float(max(s.max() for col in slices for s in col))
    span = vmax - vmin if vmax > vmin else 1.0

    rows = []
    for view in range(3):
        tiles = []
        for col in slices:
            tile = (np.clip((col[view] - vmin) / span, 0.0, 1.0) * 255.0).astype(np.uint8)
            tiles.append(tile)
        height = max(t.shape[0] for t in tiles)
        padded = []
        for t in tiles:
            canvas = np.zeros((height, t.shape[1]), dtype=np.uint8)
            canvas[: t.shape[0], :] = t
            padded.append(canvas)
        gap_col = np.zeros((height, gap), dtype=np.uint8)
        row = padded[0]
        for t in padded[1:]:
            row = np.concatenate([row, gap_col, t], axis=1)
        rows.append(row)
    width = max(r.shape[1] for r in rows)
    gap_row = np.zeros((gap, width), dtype=np.uint8)
    canvas_rows = []
    for r in rows:
        c = np.zeros((r.shape[0], width), dtype=np.uint8)
        c[:, : r.shape[1]] = r
        canvas_rows.append(c)
    image = canvas_rows[0]
    for r in canvas_rows[1:]:
        image = np.concatenate([image, gap_row, r], axis=0)

    write_pgm(path, image)
    sidecar = {
        "window": {"vmin": vmin, "vmax": vmax},
        "columns": [label for label, _ in columns],
        "rows": ["axial", "coronal", "sagittal"],
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return sidecar
