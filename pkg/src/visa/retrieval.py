"""Cross-view retrieval evaluation: distances, CMC / mAP and view protocols."""

from __future__ import annotations

import csv
import json
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

NORM_FLOOR = 1e-12
GROUND, AERIAL = 0, 1

REPORT_SCHEMA = {
    "type": "object",
    "required": ["protocol", "rank1", "map", "cmc", "num_queries", "num_skipped"],
    "properties": {
        "protocol": {"type": "string"},
        "rank1": {"type": "number", "minimum": 0, "maximum": 1},
        "map": {"type": "number", "minimum": 0, "maximum": 1},
        "cmc": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "num_queries": {"type": "integer", "minimum": 0},
        "num_skipped": {"type": "integer", "minimum": 0},
    },
}


class EmptyProtocolError(ValueError):
    pass


@dataclass
class EvalReport:
    protocol: str
    rank1: float
    map: float
    cmc: List[float]
    num_queries: int
    num_skipped: int
    dist: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("dist")
        return d


Predicate = Callable[[int, int], bool]


@dataclass
class ProtocolSpec:
    """Query and gallery filters on ``(view, camera)`` plus the cross-camera rule."""

    name: str
    query_filter: Predicate
    gallery_filter: Predicate
    cross_camera_rule: bool = True


def _any(view: int, cam: int) -> bool:
    return True


def _is(v: int) -> Predicate:
    return lambda view, cam: view == v


PROTOCOLS: Dict[str, ProtocolSpec] = {
    "ALL": ProtocolSpec("ALL", _any, _any),
    "A2G": ProtocolSpec("A2G", _is(AERIAL), _is(GROUND)),
    "G2A": ProtocolSpec("G2A", _is(GROUND), _is(AERIAL)),
    "GG": ProtocolSpec("GG", _is(GROUND), _is(GROUND)),
    "AA": ProtocolSpec("AA", _is(AERIAL), _is(AERIAL)),
    "G2AG": ProtocolSpec("G2AG", _is(GROUND), _any),
}
# bidirectional protocols are the mean of their two directions
BIDIRECTIONAL: Dict[str, Tuple[str, str]] = {"AG": ("A2G", "G2A")}


def distance_matrix(query_feats: np.ndarray, gallery_feats: np.ndarray) -> np.ndarray:
    """Cosine distance ``1 - cos`` with a 1e-12 norm floor."""
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), NORM_FLOOR)
    g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), NORM_FLOOR)
    return 1.0 - q @ g.T


def has_degenerate(feats: np.ndarray) -> bool:
    return bool((np.linalg.norm(np.asarray(feats), axis=1) < NORM_FLOOR).any())


def euclidean_distance_matrix(query_feats: np.ndarray, gallery_feats: np.ndarray) -> np.ndarray:
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    sq = (q**2).sum(1)[:, None] + (g**2).sum(1)[None, :] - 2 * q @ g.T
    return np.sqrt(np.maximum(sq, 0.0))


def _average_precision(matches: np.ndarray) -> Fraction:
    """Exact rational AP, so results are correctly rounded once at the end."""
    hits = np.flatnonzero(matches)
    total = sum((Fraction(i + 1, int(pos) + 1) for i, pos in enumerate(hits)), Fraction(0))
    return total / len(hits)


def cmc_map(
    dist: np.ndarray,
    q_labels: Sequence[int],
    g_labels: Sequence[int],
    q_cams: Sequence[int],
    g_cams: Sequence[int],
    rule: bool = True,
    protocol: str = "",
) -> EvalReport:
    """Standard ReID ranking metrics.

    Gallery entries sharing both identity and camera with the query are
    discarded when ``rule`` is on. Queries left without any true match are
    skipped and counted in ``num_skipped``.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_labels, g_labels = np.asarray(q_labels), np.asarray(g_labels)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    nq, ng = dist.shape
    if len(q_labels) != nq or len(q_cams) != nq or len(g_labels) != ng or len(g_cams) != ng:
        raise ValueError("label/camera lengths do not match the distance matrix")

    cmc = np.zeros(ng)
    aps = []
    skipped = 0
    for i in range(nq):
        order = np.argsort(dist[i], kind="stable")
        same_id = g_labels[order] == q_labels[i]
        if rule:
            keep = ~(same_id & (g_cams[order] == q_cams[i]))
        else:
            keep = np.ones(ng, dtype=bool)
        matches = same_id[keep]
        if not matches.any():
            skipped += 1
            continue
        first = int(np.argmax(matches))
        cmc[first:] += 1
        aps.append(_average_precision(matches))

    valid = nq - skipped
    if valid:
        cmc /= valid
    m = float(sum(aps, Fraction(0)) / len(aps)) if aps else 0.0
    return EvalReport(
        protocol=protocol,
        rank1=float(cmc[0]) if ng else 0.0,
        map=m,
        cmc=cmc.tolist(),
        num_queries=valid,
        num_skipped=skipped,
        dist=dist,
    )


def apply_protocol(manifest: Sequence[dict], protocol: ProtocolSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Row indices of queries and gallery entries selected by a protocol.

    Rows carry ``split`` (``query``/``gallery``), ``view_label``,
    ``camera_id`` and ``identity_label``. Raises if either side is empty or
    no query keeps a valid match under the cross-camera rule.
    """
    q_idx, g_idx = [], []
    for i, row in enumerate(manifest):
        view, cam = int(row["view_label"]), int(row["camera_id"])
        if row["split"] == "query" and protocol.query_filter(view, cam):
            q_idx.append(i)
        elif row["split"] == "gallery" and protocol.gallery_filter(view, cam):
            g_idx.append(i)
    if not q_idx or not g_idx:
        raise EmptyProtocolError(f"protocol {protocol.name}: empty query or gallery set")

    gallery = [(manifest[j]["identity_label"], manifest[j]["camera_id"]) for j in g_idx]
    for i in q_idx:
        qid, qcam = manifest[i]["identity_label"], manifest[i]["camera_id"]
        if any(gid == qid and (not protocol.cross_camera_rule or gcam != qcam) for gid, gcam in gallery):
            break
    else:
        raise EmptyProtocolError(f"protocol {protocol.name}: no query has a valid gallery match")
    return np.asarray(q_idx), np.asarray(g_idx)


def evaluate_protocol(
    feats: np.ndarray,
    manifest: Sequence[dict],
    name: str,
    metric: str = "cosine",
) -> List[EvalReport]:
    """Reports for one protocol name; bidirectional names also emit each direction."""
    if name in BIDIRECTIONAL:
        parts = [evaluate_protocol(feats, manifest, d, metric)[0] for d in BIDIRECTIONAL[name]]
        merged = EvalReport(
            protocol=name,
            rank1=float(np.mean([p.rank1 for p in parts])),
            map=float(np.mean([p.map for p in parts])),
            cmc=_mean_cmc([p.cmc for p in parts]),
            num_queries=sum(p.num_queries for p in parts),
            num_skipped=sum(p.num_skipped for p in parts),
        )
        return [merged] + parts
    if name not in PROTOCOLS:
        raise KeyError(f"unknown protocol {name!r}")
    spec = PROTOCOLS[name]
    qi, gi = apply_protocol(manifest, spec)
    feats = np.asarray(feats)
    dist_fn = distance_matrix if metric == "cosine" else euclidean_distance_matrix
    dist = dist_fn(feats[qi], feats[gi])
    col = lambda rows, key: [manifest[j][key] for j in rows]  # noqa: E731
    return [
        cmc_map(
            dist,
            col(qi, "identity_label"),
            col(gi, "identity_label"),
            col(qi, "camera_id"),
            col(gi, "camera_id"),
            rule=spec.cross_camera_rule,
            protocol=name,
        )
    ]


def _mean_cmc(curves: Sequence[Sequence[float]]) -> List[float]:
    """Average curves of possibly different lengths, extending each with its last value."""
    n = max(len(c) for c in curves)
    padded = [list(c) + [c[-1] if len(c) else 0.0] * (n - len(c)) for c in curves]
    return np.mean(padded, axis=0).tolist()


def save_features(path: Path, feats: np.ndarray, manifest: Sequence[dict]) -> None:
    """Write ``<path>.npy`` and a JSON sidecar ``<path>.json`` with the per-row labels."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), np.asarray(feats, dtype=np.float32))
    path.with_suffix(".json").write_text(json.dumps({"rows": list(manifest)}, indent=1))


def load_features(path: Path) -> Tuple[np.ndarray, List[dict]]:
    path = Path(path)
    feats = np.load(path.with_suffix(".npy"))
    rows = json.loads(path.with_suffix(".json").read_text())["rows"]
    if len(rows) != len(feats):
        raise ValueError("feature array and sidecar disagree on row count")
    return feats, rows


def write_reports(reports: Sequence[EvalReport], json_path: Path, csv_path: Optional[Path] = None) -> None:
    json_path = Path(json_path)
    json_path.write_text(json.dumps([r.to_json() for r in reports], indent=2))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["protocol", "rank1", "map", "num_queries", "num_skipped"])
            for r in reports:
                writer.writerow([r.protocol, r.rank1, r.map, r.num_queries, r.num_skipped])
