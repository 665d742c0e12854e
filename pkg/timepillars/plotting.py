"""BEV figures of a core frame: points, ground truths and detections."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import FancyArrow, Polygon  # noqa: E402

CLASS_COLORS = {"vehicle": "blue", "cyclist": "red", "pedestrian": "green", "unclear": "gray"}
SVG_SALT = "timepillars-bev"
FORMATS = (".svg", ".ppm")
RASTER_DPI = 100


def _draw_box(ax, box, kind, index, linestyle):
    color = CLASS_COLORS[box.label]
    ax.add_patch(Polygon(box.corners(), closed=True, fill=False, edgecolor=color,
                         linestyle=linestyle, linewidth=1.2, gid=f"{kind}-box-{index}"))
    head = max(box.l / 2, 0.5)
    ax.add_patch(FancyArrow(box.cx, box.cy, head * math.cos(box.yaw), head * math.sin(box.yaw),
                            width=0.05, head_width=0.4, head_length=0.4, length_includes_head=True,
                            color=color, gid=f"{kind}-arrow-{index}"))


def write_ppm(fig, out_file):
    """Rasterize ``fig`` with Agg and store it as binary PPM (P6)."""
    fig.canvas.draw()
    rgb = np.asarray(fig.canvas.buffer_rgba())[..., :3]
    height, width = rgb.shape[:2]
    with open(out_file, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    return out_file


def read_ppm(path):
    """(H, W, 3) uint8 pixels of a binary PPM written by :func:`write_ppm`."""
    raw = Path(path).read_bytes()
    magic, size, maxval, pixels = raw.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    width, height = (int(v) for v in size.split())
    if len(pixels) != width * height * 3:
        raise ValueError(f"{path}: expected {width * height * 3} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)


def render_bev(points, ground_truths, detections, out_file, extent=None, title=None):
    """
    Save a static figure of the core frame, SVG or PPM by file suffix.

    Ground truths are drawn solid and detections dashed, colored by class,
    each with a heading arrow. SVG patches carry ids ``gt-box-<i>``,
    ``gt-arrow-<i>``, ``det-box-<i>`` and ``det-arrow-<i>``. Output bytes are
    reproducible for fixed input.

    Args:
        points: (N, >=2) core-frame points
        ground_truths: list of RotatedBox
        detections: list of RotatedBox (may be empty)
        out_file: Target .svg or .ppm path
        extent: (x_min, x_max, y_min, y_max) in meters; fitted to the data if None
        title: Optional figure title
    """
    out_file = Path(out_file)
    suffix = out_file.suffix.lower()
    if suffix not in FORMATS:
        raise ValueError(f"unsupported figure format {out_file.suffix!r}, expected one of {FORMATS}")
    out_file.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(8, 8), dpi=RASTER_DPI)
        if len(points):
            ax.scatter(points[:, 0], points[:, 1], s=0.5, c="black", alpha=0.5, linewidths=0, gid="points")
        for i, box in enumerate(ground_truths):
            _draw_box(ax, box, "gt", i, "-")
        for i, box in enumerate(detections):
            _draw_box(ax, box, "det", i, "--")
        if extent is not None:
            ax.set_xlim(extent[0], extent[1])
            ax.set_ylim(extent[2], extent[3])
        else:
            ax.autoscale_view()
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        if title:
            ax.set_title(title, fontweight="bold")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        if suffix == ".ppm":
            write_ppm(fig, out_file)
        else:
            fig.savefig(out_file, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out_file
