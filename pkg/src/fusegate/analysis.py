"""Policy statistics over recorded gate traces.

Computes overall keep/reuse/skip fractions, the reuse/keep quotient, the
per-block fraction series by depth, and per-block "instance" fractions: the
share of (video, channel) pairs whose decision never changes across the
frames of one clip. A cubic least-squares fit summarizes the depth trend of
each policy.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .gating import DECISION_NAMES, GateTrace


@dataclass
class PolicyStats:
    overall: dict[str, float]                 # fractions, sum to 1
    quotient: float                           # reuse / keep, 0 when keep == 0
    quotient_defined: bool
    per_block: list[dict]                     # ordered by block depth
    totals: dict[str, int]                    # raw decision counts


def _block_entry(block: int, counts: np.ndarray, const_counts: np.ndarray,
                 decisions: int, videos_channels: int) -> dict:
    entry = {"block": block}
    for code, name in enumerate(DECISION_NAMES):
        entry[name] = counts[code] / decisions
        entry[f"{name}_instance"] = const_counts[code] / videos_channels
    return entry


def aggregate(traces) -> PolicyStats:
    """Fold a stream of GateTrace records into PolicyStats.

    Fractions weight every (sample, frame, channel) decision equally;
    instance fractions count channels whose policy is constant over all
    frames of one video. Permutation invariant and mergeable by construction
    (everything is a ratio of summed counts).
    """
    per_block_counts: dict[int, np.ndarray] = {}
    per_block_const: dict[int, np.ndarray] = {}
    per_block_decisions: dict[int, int] = {}
    per_block_vc: dict[int, int] = {}
    total = np.zeros(3)

    count = 0
    for g in traces:
        if not isinstance(g, GateTrace):
            raise ContractError(f"expected GateTrace entries, got {type(g).__name__}")
        count += 1
        dec = g.decisions
        counts = per_block_counts.setdefault(g.block, np.zeros(3))
        const = per_block_const.setdefault(g.block, np.zeros(3))
        for code in range(3):
            eq = dec == code
            counts[code] += int(eq.sum())
            const[code] += int(eq.all(axis=1).sum())
        total += counts_of(dec)
        per_block_decisions[g.block] = per_block_decisions.get(g.block, 0) + dec.size
        per_block_vc[g.block] = (per_block_vc.get(g.block, 0)
                                 + dec.shape[0] * dec.shape[2])
    if count == 0:
        raise ContractError("aggregate needs at least one trace")

    overall = total / total.sum()
    keep, reuse = overall[0], overall[1]
    defined = keep > 0
    per_block = [
        _block_entry(b, per_block_counts[b], per_block_const[b],
                     per_block_decisions[b], per_block_vc[b])
        for b in sorted(per_block_counts)
    ]
    return PolicyStats(
        overall={name: float(overall[code]) for code, name in enumerate(DECISION_NAMES)},
        quotient=float(reuse / keep) if defined else 0.0,
        quotient_defined=bool(defined),
        per_block=per_block,
        totals={name: int(total[code]) for code, name in enumerate(DECISION_NAMES)},
    )


def counts_of(decisions: np.ndarray) -> np.ndarray:
    return np.array([(decisions == code).sum() for code in range(3)], dtype=np.float64)


def trend_fit(series, order: int = 3):
    """Least-squares polynomial in the block index for each policy.

    ``series`` is a list of per-block fraction triples (or a list of floats
    for a single curve). Returns (coefficients, residuals): coefficients in
    ascending powers, one row per input column. Solved by normal equations
    with an explicit conditioning check; block counts are tiny.
    """
    y = np.asarray(series, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0]
    if n < order + 1:
        raise ContractError(f"need at least {order + 1} blocks for an order-"
                            f"{order} fit, got {n}")
    x = np.arange(n, dtype=np.float64)
    v = np.vander(x, order + 1, increasing=True)
    gram = v.T @ v
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise ContractError(f"normal equations are ill-conditioned (cond={cond:.2e})")
    coeffs = np.linalg.solve(gram, v.T @ y)
    residuals = y - v @ coeffs
    return coeffs.T, residuals.T


def export(stats: PolicyStats, out_dir) -> tuple[str, str]:
    """Write stats.json and per_block.csv; returns their paths."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "stats.json")
    csv_path = os.path.join(out_dir, "per_block.csv")
    payload = {
        "overall": stats.overall,
        "quotient": stats.quotient,
        "quotient_defined": stats.quotient_defined,
        "totals": stats.totals,
        "per_block": stats.per_block,
    }
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2)
    columns = ["block"] + list(DECISION_NAMES) + [f"{n}_instance"
                                                  for n in DECISION_NAMES]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for entry in stats.per_block:
            writer.writerow([entry["block"]] +
                            [f"{entry[c]:.17g}" for c in columns[1:]])
    return json_path, csv_path


def load_stats(json_path) -> PolicyStats:
    with open(json_path) as fh:
        payload = json.load(fh)
    return PolicyStats(
        overall=payload["overall"],
        quotient=payload["quotient"],
        quotient_defined=payload["quotient_defined"],
        per_block=payload["per_block"],
        totals=payload["totals"],
    )
