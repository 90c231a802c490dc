"""Subspace stability metrics, the random-subspace null, and trajectory summaries."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, thin_svd

ORTHO_TOL = 1e-8

TRAJECTORY_COLUMNS = ("stage", "method", "seed", "safety", "domain", "general", "refusal")
STABILITY_COLUMNS = ("transition", "mean_cos", "d_G", "k_s", "method", "seed", "basis")
NULL_COLUMNS = ("dim", "k", "trials", "seed", "mean_cos", "std_cos", "mean_d_G", "std_d_G")


@dataclass(frozen=True)
class SubspaceComparison:
    angles: np.ndarray  # ascending, radians
    mean_cos: float
    d_g: float
    k1: int
    k2: int


def _check_orthonormal(v: np.ndarray, name: str) -> None:
    err = np.abs(v.T @ v - np.eye(v.shape[1])).max() if v.shape[1] else 0.0
    if err > ORTHO_TOL:
        raise ValueError(f"{name} columns are not orthonormal (max |V^T V - I| = {err:.2e})")


def principal_angles(v1, v2) -> np.ndarray:
    """Ascending principal angles: arccos of the singular values of V1^T V2 (clamped to [0, 1])."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.ndim != 2 or v2.ndim != 2 or v1.shape[0] != v2.shape[0]:
        raise ShapeError(f"bases of shapes {v1.shape} and {v2.shape} are not comparable")
    _check_orthonormal(v1, "v1")
    _check_orthonormal(v2, "v2")
    m = min(v1.shape[1], v2.shape[1])
    if m == 0:
        return np.zeros(0)
    cosines = thin_svd(v1.T @ v2).singular_values[:m]
    return np.sort(np.arccos(np.clip(cosines, 0.0, 1.0)))


def grassmannian_distance(angles, k_s: int | None = None) -> float:
    """sqrt(sum theta^2) / sqrt(k_s (pi/2)^2), in [0, 1]."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.size == 0:
        raise ValueError("grassmannian distance of an empty angle set")
    k = angles.size if k_s is None else k_s
    if k != angles.size:
        raise ValueError(f"angle count {angles.size} does not match k_s={k}")
    return float(np.sqrt(np.sum(angles**2)) / np.sqrt(k * (np.pi / 2) ** 2))


def compare(v1, v2) -> SubspaceComparison:
    """Angles over min(k1, k2) directions; d_G normalized by that count."""
    ang = principal_angles(v1, v2)
    k1, k2 = np.shape(v1)[1], np.shape(v2)[1]
    if ang.size == 0:
        return SubspaceComparison(ang, float("nan"), float("nan"), k1, k2)
    return SubspaceComparison(ang, float(np.mean(np.cos(ang))), grassmannian_distance(ang), k1, k2)


def random_orthonormal(rng: np.random.Generator, dim: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, k)))
    return q * np.sign(np.diag(r))


def random_subspace_null(dim: int, k: int, trials: int, seed: int) -> dict:
    """Statistics of principal-angle metrics between pairs of uniformly random k-dim subspaces."""
    if not 1 <= k <= dim:
        raise ValueError(f"need 1 <= k <= dim, got k={k}, dim={dim}")
    cos, dg = [], []
    for trial in range(trials):
        rng = np.random.default_rng([int(seed), int(dim), int(k), trial])
        c = compare(random_orthonormal(rng, dim, k), random_orthonormal(rng, dim, k))
        cos.append(c.mean_cos)
        dg.append(c.d_g)
    cos, dg = np.array(cos), np.array(dg)
    return {
        "dim": dim,
        "k": k,
        "trials": trials,
        "seed": seed,
        "mean_cos": float(cos.mean()),
        "std_cos": float(cos.std()),
        "mean_d_G": float(dg.mean()),
        "std_d_G": float(dg.std()),
    }


def matched_null(entry: dict, trials: int = 50, seed: int = 0) -> dict:
    """Null for one stability entry: per layer, random pairs at that layer's
    dimension and min(k_old, k_new); averaged with equal layer weights like the entry."""
    nulls = [random_subspace_null(l["dim"], min(l["k_old"], l["k_new"]), trials, seed) for l in entry["per_layer"]]
    null_cos = float(np.mean([n["mean_cos"] for n in nulls]))
    return {
        "mean_cos": null_cos,
        "mean_d_G": float(np.mean([n["mean_d_G"] for n in nulls])),
        "ratio": entry["mean_cos"] / null_cos,
    }


def per_step_slope(values) -> float:
    """(first - last) / (number of steps)."""
    values = list(values)
    if len(values) < 2:
        return 0.0
    return (values[0] - values[-1]) / (len(values) - 1)


def trajectory_rows(log: dict) -> list[dict]:
    rows = []
    for st in log["stages"]:
        m = st["metrics"]
        rows.append(
            {
                "stage": st["label"],
                "method": log["config"]["method"],
                "seed": log["seed"],
                "safety": m["composite"],
                "domain": m["domain"],
                "general": m["general"],
                "refusal": m["refusal"],
            }
        )
    return rows


def stability_rows(log: dict) -> list[dict]:
    rows = []
    for st in log["stages"]:
        for basis, key in (("maintained", "stability"), ("fresh", "fresh_stability")):
            s = st.get(key)
            if not s:
                continue
            rows.append(
                {
                    "transition": s["transition"],
                    "mean_cos": s["mean_cos"],
                    "d_G": s["d_G"],
                    "k_s": s["k_s"],
                    "method": log["config"]["method"],
                    "seed": log["seed"],
                    "basis": basis,
                }
            )
    return rows


def to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def trajectory_report(logs: list[dict]) -> tuple[str, str]:
    """(CSV text, human-readable summary) for one or more run logs."""
    rows = [r for log in logs for r in trajectory_rows(log)]
    by_method: dict[str, list[dict]] = {}
    for log in logs:
        by_method.setdefault(log["config"]["method"], []).append(log)

    lines = []
    for method, group in sorted(by_method.items()):
        traj = np.array([[st["metrics"]["composite"] for st in g["stages"]] for g in group])
        refusal = np.array([[st["metrics"]["refusal"] for st in g["stages"]] for g in group])
        labels = [st["label"] for st in group[0]["stages"]]
        mean = traj.mean(axis=0)
        sd = traj.std(axis=0)
        path = " -> ".join(f"{m:.1f}" for m in mean)
        slopes = [per_step_slope(t) for t in traj]
        rslopes = [per_step_slope(t) for t in refusal]
        lines.append(f"{method} (n={len(group)} seeds) stages {', '.join(labels)}")
        lines.append(f"  safety  {path}  (final sd {sd[-1]:.2f})")
        lines.append(f"  refusal {' -> '.join(f'{m:.1f}' for m in refusal.mean(axis=0))}")
        lines.append(
            f"  slope   {np.mean(slopes):.2f} pts/step composite, {np.mean(rslopes):.2f} pts/step refusal"
        )
    if "unconstrained" in by_method and "safeanchor" in by_method:
        ref = np.mean([per_step_slope([s["metrics"]["refusal"] for s in g["stages"]]) for g in by_method["unconstrained"]])
        ours = np.mean([per_step_slope([s["metrics"]["refusal"] for s in g["stages"]]) for g in by_method["safeanchor"]])
        if ours > 0:
            lines.append(f"slope ratio unconstrained/safeanchor (refusal): {ref / ours:.2f}")
        else:
            lines.append("slope ratio unconstrained/safeanchor (refusal): safeanchor slope <= 0")
    return to_csv(rows, TRAJECTORY_COLUMNS), "\n".join(lines) + "\n"
