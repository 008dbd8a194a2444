"""ASCII NetPBM export of token attention maps and grounded masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from divtok.config import ModelConfig
from divtok.data import Example
from divtok.model import collate, encode
from divtok.nn import ParameterStore
from divtok.tensor import no_grad


def _rows(values: np.ndarray, per_line: int) -> str:
    flat = [str(int(v)) for v in values.reshape(-1)]
    return "\n".join(" ".join(flat[i : i + per_line]) for i in range(0, len(flat), per_line)) + "\n"


def write_pgm(path, gray: np.ndarray) -> None:
    """P2, maxval 255."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {gray.shape}")
    h, w = gray.shape
    Path(path).write_text(f"P2\n{w} {h}\n255\n" + _rows(np.clip(gray, 0, 255), w), encoding="ascii")


def write_ppm(path, rgb: np.ndarray) -> None:
    """P3, maxval 255."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_text(f"P3\n{w} {h}\n255\n" + _rows(np.clip(rgb, 0, 255), 3 * w), encoding="ascii")


def read_netpbm(path) -> np.ndarray:
    """Parse an ASCII P2/P3 file (``#`` comments allowed) into uint8 (H, W) or (H, W, 3)."""
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] not in ("P2", "P3"):
        raise ValueError("not an ASCII P2/P3 file")
    w, h, maxval = (int(t) for t in tokens[1:4])
    ch = 3 if tokens[0] == "P3" else 1
    vals = np.array([int(t) for t in tokens[4:]])
    if vals.size != w * h * ch or maxval != 255 or (vals > maxval).any():
        raise ValueError("pixel data does not match header")
    return vals.astype(np.uint8).reshape((h, w, 3) if ch == 3 else (h, w))


def normalize_map(a: np.ndarray) -> np.ndarray:
    """round(255 * (a - min) / (max - min)); a constant map becomes all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round(255.0 * (a - lo) / (hi - lo)).astype(np.uint8)


def stack_time(grid: np.ndarray) -> np.ndarray:
    """(T, H, W, ...) -> (T*H, W, ...), frames stacked top to bottom."""
    return grid.reshape(grid.shape[0] * grid.shape[1], *grid.shape[2:])


def map_grids(cfg: ModelConfig, maps_per_layer) -> list[list[np.ndarray]]:
    """Per layer, per token (streams in declaration order): the map reshaped to its feature grid.

    Image grids are (H', W'); video grids are (T', H', W').
    """
    out = []
    for layer in maps_per_layer:
        grids = []
        for spec, maps in zip(cfg.stream_specs, layer):
            a = np.asarray(maps.data[0], dtype=np.float64)
            shape = spec.grid[1:] if cfg.mode == "image" else spec.grid
            grids += [row.reshape(shape) for row in a]
        out.append(grids)
    return out


def grounded(cfg: ModelConfig, visual: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Input scaled per pixel by the min-max normalized map, upsampled nearest-neighbour."""
    weight = normalize_map(grid).astype(np.float64) / 255.0
    if cfg.mode == "image":
        h, w = visual.shape[:2]
        up = weight.repeat(h // weight.shape[0], axis=0).repeat(w // weight.shape[1], axis=1)
        return np.round(visual * up[:, :, None]).astype(np.uint8)
    t, h, w = visual.shape[:3]
    up = weight.repeat(t // weight.shape[0], axis=0).repeat(h // weight.shape[1], axis=1).repeat(w // weight.shape[2], axis=2)
    return stack_time(np.round(visual * up[..., None]).astype(np.uint8))


def export_attention_maps(cfg: ModelConfig, params: ParameterStore, example: Example, out_dir) -> list[Path]:
    """Write ``layer{l}_token{i}.pgm`` for every layer/token and ``grounded_token{i}.ppm`` for the last layer."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        _, _, maps = encode(cfg, params, collate(cfg, [example]))
    grids = map_grids(cfg, maps)
    written = []
    for layer, layer_grids in enumerate(grids):
        for i, g in enumerate(layer_grids):
            path = out / f"layer{layer}_token{i}.pgm"
            write_pgm(path, normalize_map(g if g.ndim == 2 else stack_time(g)))
            written.append(path)
    for i, g in enumerate(grids[-1]):
        path = out / f"grounded_token{i}.ppm"
        write_ppm(path, grounded(cfg, np.asarray(example.visual), g))
        written.append(path)
    return written
