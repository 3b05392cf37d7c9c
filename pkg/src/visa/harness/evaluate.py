"""Embedding extraction and protocol evaluation for trained or freshly initialised models."""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from scipy.special import comb

from visa.harness.config import RunConfig
from visa.harness.train import CheckpointRecord, build_model, load_checkpoint, load_data
from visa.model import ViSA
from visa.retrieval import EvalReport, evaluate_protocol, write_reports
from visa.synthetic import SyntheticDataset

DEFAULT_PROTOCOLS = ("ALL", "AG", "GG", "AA")


def model_from_checkpoint(record: CheckpointRecord) -> ViSA:
    cfg = record.run_config()
    num_classes = record.model_state["global_head.classifier.weight"].shape[0]
    model = build_model(cfg, num_classes)
    model.load_state_dict(record.model_state)
    return model.eval()


def random_model(cfg: RunConfig, num_classes: int, seed: Optional[int] = None) -> ViSA:
    torch.manual_seed(cfg.seed if seed is None else seed)
    return build_model(cfg, num_classes).eval()


def eval_rows(ds: SyntheticDataset) -> np.ndarray:
    return np.asarray([r["index"] for r in ds.manifest if r["split"] in ("query", "gallery")], dtype=int)


def extract_features(model: ViSA, ds: SyntheticDataset, indices: np.ndarray, batch_size: int = 128) -> np.ndarray:
    model.eval()
    views = torch.from_numpy(ds.column("view_label", indices).astype(np.int64))
    pixels = torch.from_numpy(ds.pixels(indices))
    feats = [
        model.embed(pixels[i : i + batch_size], views[i : i + batch_size])
        for i in range(0, len(indices), batch_size)
    ]
    return torch.cat(feats).numpy()


def evaluate_model(
    model: ViSA,
    ds: SyntheticDataset,
    protocols: Sequence[str] = DEFAULT_PROTOCOLS,
    metric: str = "cosine",
) -> List[EvalReport]:
    rows = eval_rows(ds)
    feats = extract_features(model, ds, rows)
    manifest = [ds.manifest[i] for i in rows]
    reports: List[EvalReport] = []
    for name in protocols:
        reports.extend(evaluate_protocol(feats, manifest, name, metric))
    return reports


def view_accuracy(model: ViSA, ds: SyntheticDataset) -> float:
    rows = eval_rows(ds)
    views = torch.from_numpy(ds.column("view_label", rows).astype(np.int64))
    pred = model.predict_view(torch.from_numpy(ds.pixels(rows)), views)
    return float((pred == views).float().mean())


def evaluate(
    checkpoint: Union[CheckpointRecord, str, Path],
    dataset: Optional[SyntheticDataset] = None,
    protocols: Sequence[str] = DEFAULT_PROTOCOLS,
    out_prefix: Optional[Union[str, Path]] = None,
) -> List[EvalReport]:
    """Evaluate a checkpoint; writes ``<prefix>.json`` and ``<prefix>.csv`` when a prefix is given."""
    record = checkpoint if isinstance(checkpoint, CheckpointRecord) else load_checkpoint(checkpoint)
    cfg = record.run_config()
    ds = dataset if dataset is not None else load_data(cfg)
    reports = evaluate_model(model_from_checkpoint(record), ds, protocols, cfg.metric)
    if out_prefix is not None:
        prefix = Path(out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        write_reports(reports, prefix.with_suffix(".json"), prefix.with_suffix(".csv"))
    return reports


def expected_random_ap(num_relevant: int, num_items: int) -> float:
    """Exact expected AP of a uniformly random ranking.

    The k-th relevant item sits at position n with negative-hypergeometric
    probability ``C(n-1, k-1) C(G-n, R-k) / C(G, R)``; AP averages ``k / n``.
    """
    r, g = num_relevant, num_items
    total = comb(g, r, exact=True)
    acc = 0.0
    for k in range(1, r + 1):
        for n in range(k, g - r + k + 1):
            p = comb(n - 1, k - 1, exact=True) * comb(g - n, r - k, exact=True) / total
            acc += p * k / n
    return acc / r


def chance_map(ds: SyntheticDataset, protocol: str) -> float:
    """Mean expected AP over a protocol's queries under random ranking (cross-camera rule applied)."""
    from visa.retrieval import BIDIRECTIONAL, PROTOCOLS, apply_protocol

    if protocol in BIDIRECTIONAL:
        return float(np.mean([chance_map(ds, d) for d in BIDIRECTIONAL[protocol]]))
    rows = eval_rows(ds)
    manifest = [ds.manifest[i] for i in rows]
    spec = PROTOCOLS[protocol]
    qi, gi = apply_protocol(manifest, spec)
    values = []
    for i in qi:
        q = manifest[i]
        keep = [
            manifest[j] for j in gi
            if not (spec.cross_camera_rule and manifest[j]["identity_label"] == q["identity_label"]
                    and manifest[j]["camera_id"] == q["camera_id"])
        ]
        rel = sum(r["identity_label"] == q["identity_label"] for r in keep)
        if rel:
            values.append(expected_random_ap(rel, len(keep)))
    return float(np.mean(values))
