"""SVG overlays: the scene image with ground truth rings and predicted discs."""
from __future__ import annotations

import base64
import io
import xml.etree.ElementTree as ET
from typing import Sequence

import numpy as np
from matplotlib import image as mpimg

from .data import NucleusInstance
from .metrics import match_detections

SVG_NS = "http://www.w3.org/2000/svg"
PALETTE = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45"]


def class_color(class_id: int) -> str:
    return PALETTE[(class_id - 1) % len(PALETTE)]


def _png_data_uri(image: np.ndarray) -> str:
    buf = io.BytesIO()
    mpimg.imsave(buf, np.clip(image, 0.0, 1.0), format="png")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def overlay_svg(image: np.ndarray, gts: Sequence[NucleusInstance],
                preds: Sequence[NucleusInstance] = (), radius: float = 3.0,
                scale: int = 8) -> str:
    """One SVG document for a scene.

    Ground truth centroids are rings (``class="gt"``), predictions filled
    discs (``class="pred"``), both coloured by class; matched pairs within
    ``radius`` pixels are joined by a line (``class="match"``).
    """
    h, w = image.shape[:2]
    root = ET.Element("svg", {"xmlns": SVG_NS, "width": str(w * scale), "height": str(h * scale),
                              "viewBox": f"0 0 {w} {h}"})
    ET.SubElement(root, "image", {"href": _png_data_uri(image), "x": "0", "y": "0",
                                  "width": str(w), "height": str(h),
                                  "style": "image-rendering:pixelated"})
    if gts and preds:
        m = match_detections(preds, gts, radius)
        for i, j in m.pairs:
            ET.SubElement(root, "line", {"class": "match", "x1": f"{preds[i].x:.3f}", "y1": f"{preds[i].y:.3f}",
                                         "x2": f"{gts[j].x:.3f}", "y2": f"{gts[j].y:.3f}",
                                         "stroke": "#000000", "stroke-width": "0.25"})
    for g in gts:
        ET.SubElement(root, "circle", {"class": "gt", "cx": f"{g.x:.3f}", "cy": f"{g.y:.3f}", "r": "2.2",
                                       "fill": "none", "stroke": class_color(g.class_id),
                                       "stroke-width": "0.5"})
    for p in preds:
        ET.SubElement(root, "circle", {"class": "pred", "cx": f"{p.x:.3f}", "cy": f"{p.y:.3f}", "r": "0.9",
                                       "fill": class_color(p.class_id), "stroke": "#ffffff",
                                       "stroke-width": "0.15"})
    return ET.tostring(root, encoding="unicode", xml_declaration=False)
