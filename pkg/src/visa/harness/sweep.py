"""Hyperparameter sweeps: train and evaluate once per value with a shared seed."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from visa.harness.config import ConfigError, RunConfig
from visa.harness.evaluate import DEFAULT_PROTOCOLS, evaluate_model, model_from_checkpoint
from visa.harness.train import load_data, train
from visa.synthetic import SyntheticDataset

log = logging.getLogger(__name__)

PARAM_KEYS: Dict[str, str] = {
    "E": "etgm.num_experts",
    "k": "etgm.top_k",
    "lambda": "loss.lambda_balance",
    "K": "dlfm.neighbors",
}
LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
CSV_FIELDS = ("param", "value", "protocol", "rank1", "map", "num_queries", "num_skipped")


@dataclass
class SweepRow:
    param: str
    value: Union[int, float]
    protocol: str
    rank1: float
    map: float
    num_queries: int
    num_skipped: int


def default_values(param: str, cfg: RunConfig) -> List[float]:
    if param == "E":
        return list(range(1, 10))
    if param == "k":
        return list(range(1, cfg.etgm.num_experts + 1))
    if param == "lambda":
        return list(LAMBDA_GRID)
    if param == "K":
        return list(range(1, cfg.encoder.num_patches + 1))
    raise ConfigError(f"unknown sweep parameter {param!r}; choose from {sorted(PARAM_KEYS)}")


def coerce(param: str, value: float) -> Union[int, float]:
    if param not in PARAM_KEYS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {sorted(PARAM_KEYS)}")
    if param == "lambda":
        return float(value)
    if float(value) != int(value):
        raise ConfigError(f"{param} takes integer values, got {value}")
    return int(value)


def config_for(cfg: RunConfig, param: str, value: float) -> RunConfig:
    """The base config with one parameter set; sweeping E activates a single expert."""
    overrides = {PARAM_KEYS[param]: coerce(param, value)}
    if param == "E":
        overrides["etgm.top_k"] = 1
    new = cfg.replace(**overrides)
    new.validate()
    return new


def sweep(
    cfg: RunConfig,
    param: str,
    values: Optional[Sequence[float]] = None,
    protocols: Sequence[str] = DEFAULT_PROTOCOLS,
    csv_path: Optional[Union[str, Path]] = None,
    dataset: Optional[SyntheticDataset] = None,
) -> List[SweepRow]:
    """One row per value per reported protocol; bidirectional protocols also emit both directions."""
    values = default_values(param, cfg) if values is None else [coerce(param, v) for v in values]
    configs = [config_for(cfg, param, v) for v in values]  # fail before any training
    ds = dataset if dataset is not None else load_data(cfg)
    rows: List[SweepRow] = []
    for value, run_cfg in zip(values, configs):
        run_cfg.out_dir = None
        log.info("sweep %s=%s", param, value)
        model = model_from_checkpoint(train(run_cfg, dataset=ds))
        for rep in evaluate_model(model, ds, protocols, run_cfg.metric):
            rows.append(SweepRow(param, value, rep.protocol, rep.rank1, rep.map, rep.num_queries, rep.num_skipped))
    if csv_path is not None:
        write_sweep_csv(rows, csv_path)
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in rows:
            writer.writerow([getattr(r, f) for f in CSV_FIELDS])
    return path
