"""Precision / recall / F-measure with greedy IoU matching, and the TIoU variant."""
from __future__ import annotations

from dataclasses import dataclass, field

from .geometry import Polygon, iou_and_fractions

Scored = tuple[Polygon, float]


def f_measure(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class ImageMatch:
    n_det: int
    n_gt: int
    pairs: list[tuple[int, int, float, float, float]] = field(default_factory=list)  # det, gt, iou, cov, inside

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def tiou_recall_sum(self) -> float:
        return sum(iou * cov for _, _, iou, cov, _ in self.pairs)

    @property
    def tiou_precision_sum(self) -> float:
        return sum(iou * inside for _, _, iou, _, inside in self.pairs)


def match_image(dets: list[Scored], gts: list[Polygon], iou_thresh: float = 0.5,
                raster_res: int = 512) -> ImageMatch:
    """Greedy one-to-one matching in descending confidence (ties keep list order)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = set()
    result = ImageMatch(len(dets), len(gts))
    for di in order:
        best = None
        for gi, gt in enumerate(gts):
            if gi in used:
                continue
            iou, inside, cov = iou_and_fractions(dets[di][0], gt, raster_res)
            if iou >= iou_thresh and (best is None or iou > best[2]):
                best = (di, gi, iou, cov, inside)
        if best is not None:
            used.add(best[1])
            result.pairs.append(best)
    return result


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_measure: float
    tiou_precision: float
    tiou_recall: float
    tiou_f: float
    n_det: int
    n_gt: int
    tp: int
    per_image: dict[str, ImageMatch] = field(default_factory=dict)

    def to_kv(self) -> str:
        keys = ("precision", "recall", "f_measure", "tiou_precision", "tiou_recall", "tiou_f", "n_det", "n_gt", "tp")
        lines = [f"{k} = {getattr(self, k):.6f}" if isinstance(getattr(self, k), float) else f"{k} = {getattr(self, k)}"
                 for k in keys]
        for name, m in self.per_image.items():
            lines.append(f"image.{name} = det:{m.n_det} gt:{m.n_gt} tp:{m.tp}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        rows = [("standard", self.precision, self.recall, self.f_measure),
                ("tiou", self.tiou_precision, self.tiou_recall, self.tiou_f)]
        out = [f"{'protocol':<10}{'P':>8}{'R':>8}{'F':>8}"]
        out += [f"{n:<10}{p * 100:8.2f}{r * 100:8.2f}{f * 100:8.2f}" for n, p, r, f in rows]
        out.append(f"detections {self.n_det}, ground truths {self.n_gt}, matched {self.tp}")
        return "\n".join(out)


def evaluate(dets: dict[str, list[Scored]] | list[list[Scored]], gts: dict[str, list[Polygon]] | list[list[Polygon]],
             iou_thresh: float = 0.5, raster_res: int = 512) -> EvalReport:
    """Dataset-level counts pooled over images (dicts keyed by image id, or parallel lists)."""
    if not isinstance(dets, dict):
        dets = {str(i): d for i, d in enumerate(dets)}
        gts = {str(i): g for i, g in enumerate(gts)}
    missing = sorted(set(gts) ^ set(dets))
    if missing:
        raise KeyError(f"image ids present on one side only: {', '.join(missing)}")
    per = {k: match_image(dets[k], gts[k], iou_thresh, raster_res) for k in sorted(gts)}
    n_det = sum(m.n_det for m in per.values())
    n_gt = sum(m.n_gt for m in per.values())
    tp = sum(m.tp for m in per.values())
    p = tp / n_det if n_det else 0.0
    r = tp / n_gt if n_gt else 0.0
    tp_ = sum(m.tiou_precision_sum for m in per.values()) / n_det if n_det else 0.0
    tr = sum(m.tiou_recall_sum for m in per.values()) / n_gt if n_gt else 0.0
    return EvalReport(p, r, f_measure(p, r), tp_, tr, f_measure(tp_, tr), n_det, n_gt, tp, per)


def evaluate_standard(dets, gts, iou_thresh: float = 0.5) -> tuple[float, float, float]:
    rep = evaluate(dets, gts, iou_thresh)
    return rep.precision, rep.recall, rep.f_measure


def evaluate_tiou(dets, gts, iou_thresh: float = 0.5) -> tuple[float, float, float]:
    rep = evaluate(dets, gts, iou_thresh)
    return rep.tiou_precision, rep.tiou_recall, rep.tiou_f
