"""Synthetic chain system with a known linear ground truth.

The head entity has three weakly correlated oscillating sensors; every
downstream entity is a fixed gain times its upstream entity plus 1% noise.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .numerics import make_rng

CHAIN_GAINS = (0.8, 1.5)


def head_signals(length: int, rng: np.random.Generator, noise: float = 0.01) -> np.ndarray:
    t = np.arange(length)
    sig = np.vstack([np.sin(2 * np.pi * t / 37) + 0.3,
                     np.cos(2 * np.pi * t / 23) - 0.2,
                     np.sin(2 * np.pi * t / 11 + 1.0)])
    return sig + noise * rng.normal(size=sig.shape)


def chain(length: int = 240, gains=CHAIN_GAINS, seed: int = 0, noise: float = 0.01):
    """Feature matrices ``[head, mid, tail, ...]`` with ``next = gain * prev + noise``."""
    rng = make_rng(seed)
    mats = [head_signals(length, rng, noise)]
    for g in gains:
        mats.append(g * mats[-1] + noise * rng.normal(size=mats[-1].shape))
    return mats


def write_csv(path: Path, matrix: np.ndarray, feature_ids):
    lines = ["timestamp," + ",".join(feature_ids)]
    for k in range(matrix.shape[1]):
        lines.append(f"{k}," + ",".join(repr(float(v)) for v in matrix[:, k]))
    path.write_text("\n".join(lines) + "\n")


def write_chain_project(root: str | Path, length: int = 240, seed: int = 0,
                        perturb_scale: float = 1.2, perturb_shift: float = 0.1) -> dict:
    """Write data CSVs, topology, config and a one-observation scenario.

    The scenario replaces the head entity's last window by
    ``perturb_scale * window + perturb_shift``. Returns the paths written.
    """
    root = Path(root)
    (root / "data").mkdir(parents=True, exist_ok=True)
    names = ["head", "mid", "tail"]
    types = ["source_unit", "relay_unit", "sink_unit"]
    mats = chain(length, seed=seed)
    for name, M in zip(names, mats):
        write_csv(root / "data" / f"{name}.csv", M, [f"{name}_s{i}" for i in range(M.shape[0])])
    topology = {
        "entities": [{"entity_id": n, "entity_type": t, "data": f"{n}.csv"}
                     for n, t in zip(names, types)],
        "arcs": [["head", "mid"], ["mid", "tail"]],
    }
    config = {"delta": 0.3, "lam": 10.0, "window": 8, "stride": 1, "learning_rate": 0.001,
              "momentum": 0.9, "epochs": 1500, "seed": seed, "data_dir": "data",
              "db_dir": "db", "output_dir": "out"}
    T = config["window"]
    head_window = mats[0][:, -T:] * perturb_scale + perturb_shift
    scenario = [{"kind": "observe", "observations": {"head": {"matrix": head_window.tolist()}}}]
    paths = {"topology": root / "topology.json", "config": root / "config.json",
             "scenario": root / "scenario.json"}
    paths["topology"].write_text(json.dumps(topology, indent=2) + "\n")
    paths["config"].write_text(json.dumps(config, indent=2) + "\n")
    paths["scenario"].write_text(json.dumps(scenario, indent=2) + "\n")
    return paths
