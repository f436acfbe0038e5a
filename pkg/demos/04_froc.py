"""
FROC with centre-in-box matching
================================

A detection is a true positive when its centre falls inside an unclaimed
ground-truth box; recall is read off at fixed false positives per image.
"""
import tempfile
from pathlib import Path

from uda_forge.detector import Detection
from uda_forge.evaluation import froc, image_metrics, match_detections, render_froc_svg, write_froc_csv

gts = [[(20.0, 20.0, 8.0, 8.0)], [], [(40.0, 12.0, 6.0, 6.0), (10.0, 50.0, 10.0, 10.0)]]
dets = [
    [Detection(22, 19, 6, 6, 0.9), Detection(50, 50, 6, 6, 0.4)],
    [Detection(30, 30, 6, 6, 0.7)],
    [Detection(41, 12, 5, 5, 0.8), Detection(60, 2, 5, 5, 0.2)],
]

# greedy matching in score order; each GT is consumed once
print("image 0 matches:", match_detections(dets[0], gts[0]).is_tp)

curve = froc(dets, gts, fpi_points=(0.3, 0.5, 1.0))
print("FROC points:", curve.points)
print("threshold sweep (fpi, recall):", curve.sweep)
print("image accuracy / F1 at 0.5:", image_metrics(dets, gts))

with tempfile.TemporaryDirectory() as d:
    write_froc_csv(curve, Path(d) / "froc.csv")
    render_froc_svg({"toy": curve}, Path(d) / "froc.svg")
    print((Path(d) / "froc.csv").read_text())
