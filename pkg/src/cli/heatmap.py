import logging
import os
from typing import List, Literal, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from pydantic import BaseModel, NonNegativeInt, PositiveInt

from src.errors import RejectedInputError

logger = logging.getLogger(__name__)

MIDPOINT = (255, 255, 255)
BACKGROUND = (255, 255, 255)
LABEL_COLOR = (0, 0, 0)


class HeatmapStyle(BaseModel):
    colormap: Literal["blue-white-red"] = "blue-white-red"
    normalization: Literal["max-abs"] = "max-abs"
    scale: PositiveInt = 4  # integer upscaling of each 28x28 cell
    padding: NonNegativeInt = 4
    label_height: NonNegativeInt = 14
    label_width: NonNegativeInt = 72


def _normalized(relevance: np.ndarray) -> np.ndarray:
    relevance = np.asarray(relevance, dtype=np.float64)
    if relevance.ndim != 2:
        raise RejectedInputError(f"heatmaps need a 2-D relevance map, got shape {relevance.shape}")
    if not np.all(np.isfinite(relevance)):
        raise RejectedInputError("relevance map contains non-finite values")
    peak = np.max(np.abs(relevance))
    if peak == 0:
        return np.zeros_like(relevance)
    return relevance / peak


def diverging_colors(relevance: np.ndarray) -> np.ndarray:
    """RGB uint8 map: positive relevance toward red, negative toward blue, zero exactly white.

    Both halves use the same rounding of ``255 * (1 - |u|)`` so negating the
    input swaps the red and blue channels exactly.
    """
    u = _normalized(relevance)
    fade = np.rint(255.0 * (1.0 - np.abs(u))).astype(np.uint8)
    full = np.full_like(fade, 255)
    red = np.where(u >= 0, full, fade)
    blue = np.where(u <= 0, full, fade)
    return np.stack([red, fade, blue], axis=-1)


def _upscale(pixels: np.ndarray, scale: int) -> np.ndarray:
    return np.repeat(np.repeat(pixels, scale, axis=0), scale, axis=1)


def render_heatmap(relevance: np.ndarray, style: HeatmapStyle = HeatmapStyle()) -> Image.Image:
    return Image.fromarray(_upscale(diverging_colors(relevance), style.scale))


def render_magnitude(relevance: np.ndarray, style: HeatmapStyle = HeatmapStyle()) -> Image.Image:
    """Grayscale |relevance| / max |relevance|, the PGM rendering."""
    levels = np.rint(255.0 * np.abs(_normalized(relevance))).astype(np.uint8)
    return Image.fromarray(_upscale(levels, style.scale))


def save_heatmaps(relevance: np.ndarray, path_prefix: str, style: HeatmapStyle = HeatmapStyle()) -> List[str]:
    """Writes ``<prefix>.png`` (colour) and ``<prefix>.pgm`` (P5 magnitude)."""
    os.makedirs(os.path.dirname(os.path.abspath(path_prefix)), exist_ok=True)
    png_path, pgm_path = f"{path_prefix}.png", f"{path_prefix}.pgm"
    render_heatmap(relevance, style).save(png_path, format="PNG")
    render_magnitude(relevance, style).save(pgm_path, format="PPM")
    return [png_path, pgm_path]


def compose_grid(cells: Sequence[Sequence[np.ndarray]], row_labels: Sequence[str], col_labels: Sequence[str],
                 style: HeatmapStyle = HeatmapStyle()) -> Image.Image:
    """Lays out one heatmap per (row, column) with labels on the left and on top."""
    if len(cells) != len(row_labels) or any(len(row) != len(col_labels) for row in cells):
        raise RejectedInputError("grid cells do not match the row/column labels")
    height, width = np.shape(cells[0][0])
    cell_h, cell_w = height * style.scale, width * style.scale
    pad = style.padding
    total_w = style.label_width + len(col_labels) * (cell_w + pad) + pad
    total_h = style.label_height + len(row_labels) * (cell_h + pad) + pad

    canvas = Image.new("RGB", (total_w, total_h), BACKGROUND)
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for c, label in enumerate(col_labels):
        draw.text((style.label_width + pad + c * (cell_w + pad), 1), label, fill=LABEL_COLOR, font=font)
    for r, label in enumerate(row_labels):
        top = style.label_height + pad + r * (cell_h + pad)
        draw.text((2, top + cell_h // 2 - 6), label, fill=LABEL_COLOR, font=font)
        for c, relevance in enumerate(cells[r]):
            left = style.label_width + pad + c * (cell_w + pad)
            canvas.paste(render_heatmap(relevance, style), (left, top))
    return canvas
