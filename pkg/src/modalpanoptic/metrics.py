"""Evaluation: panoptic quality family, mIoU, LSTQ and membership accuracy."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .cloud import NO_INSTANCE, PanopticLabeling, Taxonomy
from .membership import Detection, roi_points

IOU_MATCH_THRESHOLD = 0.5
_OFFSET = 2 ** 32


@dataclass
class ClassPq:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0

    @property
    def pq(self) -> float:
        return self.sq * self.rq

    @property
    def populated(self) -> bool:
        return bool(self.tp or self.fp or self.fn)


@dataclass(frozen=True)
class PqReport:
    per_class: dict[int, ClassPq]
    per_class_iou: dict[int, float]
    taxonomy: Taxonomy

    def _classes(self) -> list[int]:
        return [cid for cid, st in sorted(self.per_class.items())
                if st.populated or cid in self.per_class_iou]

    def _mean(self, values: list[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    @property
    def pq(self) -> float:
        return self._mean([self.per_class[c].pq for c in self._classes()])

    @property
    def sq(self) -> float:
        return self._mean([self.per_class[c].sq for c in self._classes()])

    @property
    def rq(self) -> float:
        return self._mean([self.per_class[c].rq for c in self._classes()])

    @property
    def pq_dagger(self) -> float:
        """PQ with stuff classes scored by plain IoU instead of segments."""
        values = []
        for c in self._classes():
            if c in self.taxonomy.stuff_ids:
                values.append(self.per_class_iou.get(c, 0.0))
            else:
                values.append(self.per_class[c].pq)
        return self._mean(values)

    def _subset(self, ids) -> list[int]:
        return [c for c in self._classes() if c in ids]

    @property
    def pq_things(self) -> float:
        return self._mean([self.per_class[c].pq for c in self._subset(self.taxonomy.thing_ids)])

    @property
    def pq_stuff(self) -> float:
        return self._mean([self.per_class[c].pq for c in self._subset(self.taxonomy.stuff_ids)])

    @property
    def miou(self) -> float:
        return self._mean(list(self.per_class_iou.values()))


class PqAccumulator:
    """Streaming PQ/IoU bookkeeping over any number of sweeps."""

    def __init__(self, taxonomy: Taxonomy):
        self.taxonomy = taxonomy
        self.stats: dict[int, ClassPq] = {}
        k = taxonomy.num_channels
        self.confusion = np.zeros((k, k), dtype=np.int64)

    def _effective_ignore(self, gt: PanopticLabeling) -> np.ndarray:
        """Ignore-class points plus points of undersized GT instances."""
        tax = self.taxonomy
        ignore = np.isin(gt.sem, list(tax.ignore_ids))
        thing = np.isin(gt.sem, list(tax.thing_ids))
        keyed = gt.inst.astype(np.int64) * tax.num_channels + gt.sem
        inst_pts = keyed[thing & (gt.inst > NO_INSTANCE)]
        if inst_pts.size:
            uniq, counts = np.unique(inst_pts, return_counts=True)
            small = set(uniq[counts < tax.min_instance_points].tolist())
            if small:
                ignore = ignore | np.isin(keyed, list(small)) & thing & (gt.inst > NO_INSTANCE)
        return ignore

    def add(self, gt: PanopticLabeling, pred: PanopticLabeling) -> None:
        if len(gt) != len(pred):
            raise ValueError("gt and pred must label the same points")
        tax = self.taxonomy
        ignore = self._effective_ignore(gt)
        keep = ~ignore
        gsem, ginst = gt.sem[keep], gt.inst[keep]
        psem, pinst = pred.sem[keep], pred.inst[keep]
        valid_conf = ~np.isin(psem, list(tax.ignore_ids))
        np.add.at(self.confusion, (gsem[valid_conf], psem[valid_conf]), 1)
        for cid in sorted(set(tax.thing_ids) | set(tax.stuff_ids)):
            st = self.stats.setdefault(cid, ClassPq())
            thing = cid in tax.thing_ids
            if thing:
                g_ids = np.where((gsem == cid) & (ginst > NO_INSTANCE), ginst, 0).astype(np.int64)
                p_ids = np.where((psem == cid) & (pinst > NO_INSTANCE), pinst, 0).astype(np.int64)
            else:
                g_ids = (gsem == cid).astype(np.int64)
                p_ids = (psem == cid).astype(np.int64)
            g_uniq, g_counts = np.unique(g_ids[g_ids > 0], return_counts=True)
            p_uniq, p_counts = np.unique(p_ids[p_ids > 0], return_counts=True)
            g_size = dict(zip(g_uniq.tolist(), g_counts.tolist()))
            p_size = dict(zip(p_uniq.tolist(), p_counts.tolist()))
            both = (g_ids > 0) & (p_ids > 0)
            combo = g_ids[both] * _OFFSET + p_ids[both]
            c_uniq, c_counts = np.unique(combo, return_counts=True)
            matched_g, matched_p = set(), set()
            for key, inter in zip(c_uniq.tolist(), c_counts.tolist()):
                g, p = key // _OFFSET, key % _OFFSET
                union = g_size[g] + p_size[p] - inter
                iou = inter / union
                if iou > IOU_MATCH_THRESHOLD:
                    st.tp += 1
                    st.iou_sum += iou
                    matched_g.add(g)
                    matched_p.add(p)
            st.fn += len(g_size) - len(matched_g)
            # Unmatched predictions mostly covering ignored points are not FPs.
            if thing:
                full_ids = np.where((pred.sem == cid) & (pred.inst > NO_INSTANCE),
                                    pred.inst, 0).astype(np.int64)
            else:
                full_ids = (pred.sem == cid).astype(np.int64)
            for p in p_size:
                if p in matched_p:
                    continue
                total = int((full_ids == p).sum())
                void = int(((full_ids == p) & ignore).sum())
                if total and void / total > 0.5:
                    continue
                st.fp += 1

    def report(self) -> PqReport:
        return PqReport(dict(self.stats), self._iou_per_class(), self.taxonomy)

    def _iou_per_class(self) -> dict[int, float]:
        out = {}
        conf = self.confusion
        for cid in sorted(set(self.taxonomy.thing_ids) | set(self.taxonomy.stuff_ids)):
            tp = int(conf[cid, cid])
            fp = int(conf[:, cid].sum()) - tp
            fn = int(conf[cid, :].sum()) - tp
            if tp + fp + fn == 0:
                continue
            out[cid] = tp / (tp + fp + fn)
        return out


def compute_pq(gt: PanopticLabeling, pred: PanopticLabeling, taxonomy: Taxonomy) -> PqReport:
    acc = PqAccumulator(taxonomy)
    acc.add(gt, pred)
    return acc.report()


def compute_miou(gt_sem: np.ndarray, pred_sem: np.ndarray, taxonomy: Taxonomy
                 ) -> tuple[dict[int, float], float]:
    """Per-class point IoU and its mean over classes present in gt or pred."""
    gt_sem = np.asarray(gt_sem)
    pred_sem = np.asarray(pred_sem)
    if gt_sem.shape != pred_sem.shape:
        raise ValueError("label arrays must have equal length")
    keep = ~np.isin(gt_sem, list(taxonomy.ignore_ids))
    g, p = gt_sem[keep], pred_sem[keep]
    per_class = {}
    for cid in sorted(set(taxonomy.thing_ids) | set(taxonomy.stuff_ids)):
        tp = int(((g == cid) & (p == cid)).sum())
        fp = int(((g != cid) & (p == cid)).sum())
        fn = int(((g == cid) & (p != cid)).sum())
        if tp + fp + fn == 0:
            continue
        per_class[cid] = tp / (tp + fp + fn)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


@dataclass(frozen=True)
class LstqReport:
    s_assoc: float
    s_cls: float

    @property
    def lstq(self) -> float:
        return float(np.sqrt(self.s_assoc * self.s_cls))


class LstqAccumulator:
    """Tube association and semantic quality pooled over whole sequences.

    Instances pool into spatio-temporal point tubes within each sequence. For
    every ground-truth thing tube t, the class-agnostic predicted tubes s
    overlapping it score sum(|s n t| * IoU(s, t)) / |t|; the association term
    averages this over all ground-truth tubes of all sequences. The semantic
    term is the pooled point mIoU.
    """

    def __init__(self, taxonomy: Taxonomy):
        self.taxonomy = taxonomy
        self.outer_sum = 0.0
        self.num_tubes = 0
        self.gt_sems: list[np.ndarray] = []
        self.pred_sems: list[np.ndarray] = []

    def add_sequence(self, gt_labelings: list[PanopticLabeling],
                     pred_labelings: list[PanopticLabeling]) -> None:
        if len(gt_labelings) != len(pred_labelings):
            raise ValueError("sequences must have the same sweep count")
        thing = list(self.taxonomy.thing_ids)
        ignore = list(self.taxonomy.ignore_ids)
        gt_sizes: dict[int, int] = {}
        pred_sizes: dict[int, int] = {}
        inter: dict[tuple[int, int], int] = {}
        for gt, pred in zip(gt_labelings, pred_labelings):
            if len(gt) != len(pred):
                raise ValueError("gt and pred must label the same points")
            keep = ~np.isin(gt.sem, ignore)
            g_tube = np.where(keep & np.isin(gt.sem, thing) & (gt.inst > NO_INSTANCE), gt.inst, 0)
            p_tube = np.where(keep & (pred.inst > NO_INSTANCE), pred.inst, 0)
            for iid, count in zip(*np.unique(g_tube[g_tube > 0], return_counts=True)):
                gt_sizes[int(iid)] = gt_sizes.get(int(iid), 0) + int(count)
            for iid, count in zip(*np.unique(p_tube[p_tube > 0], return_counts=True)):
                pred_sizes[int(iid)] = pred_sizes.get(int(iid), 0) + int(count)
            both = (g_tube > 0) & (p_tube > 0)
            combos = g_tube[both].astype(np.int64) * _OFFSET + p_tube[both]
            for key, count in zip(*np.unique(combos, return_counts=True)):
                pair = (int(key // _OFFSET), int(key % _OFFSET))
                inter[pair] = inter.get(pair, 0) + int(count)
            self.gt_sems.append(gt.sem)
            self.pred_sems.append(pred.sem)
        for (g, p), ov in inter.items():
            union = gt_sizes[g] + pred_sizes[p] - ov
            self.outer_sum += (ov * (ov / union)) / gt_sizes[g]
        self.num_tubes += len(gt_sizes)

    def report(self) -> LstqReport:
        if self.gt_sems:
            _, s_cls = compute_miou(np.concatenate(self.gt_sems),
                                    np.concatenate(self.pred_sems), self.taxonomy)
        else:
            s_cls = 0.0
        s_assoc = self.outer_sum / self.num_tubes if self.num_tubes else 1.0
        return LstqReport(s_assoc, s_cls)


def compute_lstq(
    gt_labelings: list[PanopticLabeling],
    pred_labelings: list[PanopticLabeling],
    taxonomy: Taxonomy,
) -> LstqReport:
    """Sequence-level quality for a single sequence; see LstqAccumulator."""
    acc = LstqAccumulator(taxonomy)
    acc.add_sequence(gt_labelings, pred_labelings)
    return acc.report()


def match_instances_to_detections(
    instance_centers: dict[int, np.ndarray],
    instance_classes: dict[int, int],
    detections: list[Detection],
) -> dict[int, int]:
    """Greedy one-to-one nearest-center matching within each class.

    Returns {instance id -> detection index} for the matched pairs.
    """
    pairs = []
    for iid, center in instance_centers.items():
        for d, det in enumerate(detections):
            if det.class_id != instance_classes.get(iid):
                continue
            dist = float(np.linalg.norm(np.asarray(center)[:3] - det.center))
            pairs.append((dist, iid, d))
    pairs.sort()
    matched: dict[int, int] = {}
    used_dets: set[int] = set()
    for _dist, iid, d in pairs:
        if iid in matched or d in used_dets:
            continue
        matched[iid] = d
        used_dets.add(d)
    return matched


def membership_accuracy(
    points_xyz: np.ndarray,
    gt_inst: np.ndarray,
    instance_centers: dict[int, np.ndarray],
    instance_classes: dict[int, int],
    detections: list[Detection],
    assignments: np.ndarray,
    margin_frac: float = 0.1,
    margin_floor: float = 0.1,
) -> tuple[float, int]:
    """Fraction of in-RoI instance points assigned to their matched detection.

    A point counts as correct only when its ground-truth instance is matched
    to some detection and the point was assigned exactly to it; unassigned
    instance points inside an RoI count as wrong. Returns (accuracy,
    evaluated point count).
    """
    pts = np.asarray(points_xyz, dtype=np.float64)
    gt = np.asarray(gt_inst)
    in_roi = np.zeros(pts.shape[0], dtype=bool)
    for det in detections:
        in_roi[roi_points(det, pts, inflate=True, margin_frac=margin_frac,
                          margin_floor=margin_floor)] = True
    evaluated = np.flatnonzero(in_roi & (gt > NO_INSTANCE))
    if evaluated.size == 0:
        return 0.0, 0
    matched = match_instances_to_detections(instance_centers, instance_classes, detections)
    assign = np.asarray(assignments)
    correct = 0
    for i in evaluated:
        want = matched.get(int(gt[i]), -2)  # -2 never equals a real index or -1
        if assign[i] == want:
            correct += 1
    return correct / evaluated.size, int(evaluated.size)


def pq_report_csv(report: PqReport) -> str:
    """CSV rows per class plus aggregate rows, fixed column order."""
    buf = io.StringIO()
    buf.write("class,pq,sq,rq,iou,tp,fp,fn\n")
    for cid in sorted(report.per_class):
        st = report.per_class[cid]
        if not st.populated and cid not in report.per_class_iou:
            continue
        iou = report.per_class_iou.get(cid, 0.0)
        name = report.taxonomy.name_of(cid)
        buf.write(f"{name},{st.pq:.17g},{st.sq:.17g},{st.rq:.17g},{iou:.17g},"
                  f"{st.tp},{st.fp},{st.fn}\n")
    buf.write(f"all,{report.pq:.17g},{report.sq:.17g},{report.rq:.17g},"
              f"{report.miou:.17g},,,\n")
    buf.write(f"all_dagger,{report.pq_dagger:.17g},,,,,,\n")
    buf.write(f"things,{report.pq_things:.17g},,,,,,\n")
    buf.write(f"stuff,{report.pq_stuff:.17g},,,,,,\n")
    return buf.getvalue()


def lstq_report_csv(report: LstqReport) -> str:
    return ("metric,value\n"
            f"s_assoc,{report.s_assoc:.17g}\n"
            f"s_cls,{report.s_cls:.17g}\n"
            f"lstq,{report.lstq:.17g}\n")
