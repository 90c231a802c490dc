"""End-to-end sequential adaptation runs, ablation grids and the repair sweep.

A run executes, in order: base alignment, initial safety subspace, baseline
refusal rate, then for each domain: constrained training with the anchor
gradient, probe evaluation, conditional replay (at most two blocks), and the
incremental subspace update. Every stage is appended to a JSON run log that is
sufficient to regenerate all reports.
"""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analytics
from .anchor import anchor_loss_and_grad, snapshot
from .config import TABLE4_METHODS, RunConfig
from .csm import ProbeVerdict, evaluate_probe, replay_block, trigger_decision
from .linalg import sym_eig
from .model import AdapterModel, base_checksum, flatten_model, grad_task_loss, save_checkpoint
from .osca import ProjectionPolicy
from .ssi import (
    SafetySubspace,
    eigen_spectrum_report,
    fisher_from_grads,
    layer_gradients,
    merge_subspaces,
    save_subspaces,
    select_basis,
)
from .tasks import DOMAIN_NAMES, Dataset, accuracy, align_base, concat, domain_order, generate_suite, safety_components, substream
from .training import epoch_batches, make_optimizer

LOG_SCHEMA = "safeanchor-runlog"
LOG_VERSION = 1
PSD_TOL = 1e-9
TRACE_TOL = 1e-9


class InvariantError(RuntimeError):
    pass


def _f(x) -> float:
    return float(x)


class Run:
    """One seed of one method. ``execute()`` returns the run log (a dict)."""

    def __init__(self, config: RunConfig, seed: int, artifacts_dir=None):
        self.cfg = config
        self.seed = int(seed)
        self.flags = config.flags
        self.artifacts = Path(artifacts_dir) if artifacts_dir is not None else None
        self.timings: dict[str, float] = {}
        self.policy = ProjectionPolicy(self.flags.mode, config.lam, config.trace_normalize)
        self.fisher_checks: list[dict] = []
        self.subs: list[SafetySubspace] | None = None
        self.fresh: list[SafetySubspace] | None = None
        self.models: dict[int, AdapterModel] = {}
        self._initial: list[SafetySubspace] | None = None

    # -- timing ----------------------------------------------------------
    def _tick(self, phase: str, start: float) -> None:
        self.timings[phase] = self.timings.get(phase, 0.0) + (time.perf_counter() - start)

    # -- setup -----------------------------------------------------------
    def setup(self) -> None:
        t0 = time.perf_counter()
        suite_cfg = replace(self.cfg.suite, n_safe=self.cfg.n_s)
        self.suite = generate_suite(self.seed, suite_cfg)
        self.base = align_base(self.seed, self.suite, self.cfg.align)
        self.model = self.base.model
        self.checksum = base_checksum(self.model)
        order = domain_order(self.cfg.domains, self.cfg.ordering)
        self.order = order
        self.domain_names = [self.suite.domains[j].name for j in order]
        self.classifier_rng = substream(self.seed, "classifier")
        self._tick("setup", t0)

    def probe(self, model: AdapterModel) -> float:
        return evaluate_probe(model, self.suite.probe, self.cfg.classifier_noise, self.classifier_rng)

    def metrics(self, model: AdapterModel) -> dict:
        t0 = time.perf_counter()
        m = safety_components(model, self.suite.probe)
        per_domain = {self.suite.domains[j].name: 100.0 * accuracy(model, self.suite.domain_evals[j]) for j in self.order}
        m["domain_by_task"] = per_domain
        m["domain"] = float(np.mean(list(per_domain.values())))
        m["general"] = 100.0 * accuracy(model, self.suite.general_eval)
        self._tick("evaluation", t0)
        return m

    # -- SSI -------------------------------------------------------------
    def identify(self, model: AdapterModel, stage: int) -> list[SafetySubspace]:
        t0 = time.perf_counter()
        grads = layer_gradients(model, self.suite.calib)
        subs = []
        spectra = []
        for i, g in enumerate(grads):
            f = fisher_from_grads(g)
            eig = sym_eig(f, method=self.cfg.eig_backend)
            self._check_fisher(stage, i, f, g, eig.eigenvalues)
            subs.append(select_basis(eig, self.cfg.rho, layer=i))
            rep = eigen_spectrum_report(eig)
            spectra.append({"layer": i, "top_eigenvalues": rep["eigenvalues"][:16], "k_s": rep["k_s"]})
        self.last_spectra = spectra
        self._tick("ssi", t0)
        return subs

    def _check_fisher(self, stage: int, layer: int, f: np.ndarray, g: np.ndarray, eigenvalues: np.ndarray) -> None:
        min_eig = float(eigenvalues[-1])
        trace = float(np.trace(f))
        msq = float(np.mean(np.sum(g * g, axis=1)))
        rel = abs(trace - msq) / msq if msq > 0 else abs(trace)
        eig_sum = float(np.sum(eigenvalues))
        self.fisher_checks.append(
            {
                "stage": stage,
                "layer": layer,
                "min_eig": min_eig,
                "trace": trace,
                "eig_sum": eig_sum,
                "mean_sq_grad_norm": msq,
                "trace_rel_err": rel,
            }
        )
        if min_eig < -PSD_TOL:
            raise InvariantError(f"Fisher PSD violated: stage {stage} layer {layer} min eigenvalue {min_eig:.3e}")
        if rel > TRACE_TOL:
            raise InvariantError(f"Fisher trace identity violated: stage {stage} layer {layer} rel err {rel:.3e}")

    def _compare(self, old: list[SafetySubspace], new: list[SafetySubspace], transition: str) -> dict | None:
        pairs = [(analytics.compare(o.basis, n.basis), o.dim) for o, n in zip(old, new)]
        pairs = [(c, dim) for c, dim in pairs if c.angles.size]
        cmps = [c for c, _ in pairs]
        if not cmps:
            return None
        return {
            "transition": transition,
            "mean_cos": float(np.mean([c.mean_cos for c in cmps])),
            "d_G": float(np.mean([c.d_g for c in cmps])),
            "k_s": float(np.mean([min(c.k1, c.k2) for c in cmps])),
            "per_layer": [
                {"mean_cos": c.mean_cos, "d_G": c.d_g, "k_old": c.k1, "k_new": c.k2, "dim": dim} for c, dim in pairs
            ],
        }

    # -- training --------------------------------------------------------
    def _training_set(self, t: int) -> Dataset:
        data = self.suite.domains[self.order[t - 1]]
        if not self.flags.interleave:
            return data
        calib = self.suite.calib
        n_mix = int(round(self.cfg.interleave_ratio * len(data)))
        rng = substream(self.seed, f"interleave/{t}")
        rows = rng.permutation(np.resize(np.arange(len(calib)), n_mix))
        return concat(data.name, [data, calib.subset(rows)])

    def train_domain(self, model: AdapterModel, t: int, alphas, ewc_state=None) -> AdapterModel:
        t0 = time.perf_counter()
        cfg = self.cfg
        data = self._training_set(t)
        calib = self.suite.calib
        opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.adam_projection)
        self.optimizer = opt
        batch_rng = substream(self.seed, f"batch/{t}")
        anchor_rng = substream(self.seed, f"anchor/{t}")
        ref = snapshot(model, calib) if self.flags.anchor else None
        subs = self.subs if self.flags.mode != "off" else None
        for rows in epoch_batches(batch_rng, len(data), cfg.batch_size, cfg.epochs):
            _, g = grad_task_loss(model, data.x[rows], data.y[rows])
            extra = None
            if ref is not None:
                if cfg.anchor_full:
                    ids = calib.ids
                else:
                    ids = calib.ids[anchor_rng.choice(len(calib), size=min(cfg.anchor_batch, len(calib)), replace=False)]
                _, extra = anchor_loss_and_grad(model, ref, calib, ids, cfg.gamma, cfg.kl_direction)
            if ewc_state is not None:
                diag, ref_vec = ewc_state
                cur = flatten_model(model)
                pen = [2.0 * cfg.ewc_lambda * d * (c - r) for d, c, r in zip(diag, cur, ref_vec)]
                extra = pen if extra is None else [a + b for a, b in zip(extra, pen)]
            model = opt.step(model, g, extra, subs, alphas)
        self._tick("training", t0)
        return model

    def ewc_state(self, model: AdapterModel):
        t0 = time.perf_counter()
        grads = layer_gradients(model, self.suite.calib)
        diag = []
        for i, g in enumerate(grads):
            d = np.mean(g * g, axis=0)
            msq = float(np.mean(np.sum(g * g, axis=1)))
            rel = abs(d.sum() - msq) / msq if msq > 0 else abs(d.sum())
            self.fisher_checks.append(
                {"stage": None, "layer": i, "min_eig": float(d.min()), "trace": float(d.sum()), "eig_sum": float(d.sum()),
                 "mean_sq_grad_norm": msq, "trace_rel_err": rel, "diagonal": True}
            )
            diag.append(d)
        self._tick("ssi", t0)
        return diag, flatten_model(model)

    def monitor(self, model: AdapterModel, t: int, domain: Dataset):
        """Probe, and replay if the trigger fires. Returns (model, verdict, replay steps)."""
        cfg = self.cfg
        t0 = time.perf_counter()
        s_t = self.probe(model)
        triggered = trigger_decision(s_t, self.s0, cfg.tau)
        self._tick("probe", t0)
        verdict = ProbeVerdict(t, s_t, self.s0, cfg.tau, triggered)
        if not (triggered and self.flags.csm):
            return model, verdict, 0
        t0 = time.perf_counter()
        rng = substream(self.seed, f"replay/{t}")
        subs = self.subs if self.flags.mode != "off" else None
        alphas = self.policy.alphas(self.subs) if self.subs is not None else None
        blocks, steps, s_after = 0, 0, s_t
        while blocks < 2:
            model = replay_block(
                model, self.optimizer, domain, self.suite.calib, cfg.beta, cfg.e_repair, rng, cfg.batch_size, subs, alphas,
                cfg.replay_safety,
            )
            blocks += 1
            steps += cfg.e_repair
            s_after = self.probe(model)
            if not trigger_decision(s_after, self.s0, cfg.tau):
                break
        self._tick("replay", t0)
        verdict = replace(
            verdict,
            replay_blocks_used=blocks,
            post_replay_rate=s_after,
            recovered=not trigger_decision(s_after, self.s0, cfg.tau),
        )
        return model, verdict, steps

    # -- the whole thing -------------------------------------------------
    def execute(self) -> dict:
        cfg = self.cfg
        self.setup()
        model = self.model
        stages = []

        base_entry = {"stage": 0, "label": "base", "domain": None, "metrics": self.metrics(model)}
        if self.flags.ssi:
            self.subs = self.identify(model, 0)
            self.fresh = self.subs
            base_entry["subspace"] = self._subspace_entry(self.subs)
            base_entry["spectrum"] = self.last_spectra
            self._save_subspaces(0)
        t0 = time.perf_counter()
        self.s0 = self.probe(model)
        self._tick("probe", t0)
        base_entry["s0"] = self.s0
        stages.append(base_entry)
        self.models[0] = model

        for t in range(1, cfg.domains + 1):
            name = self.domain_names[t - 1]
            domain = self.suite.domains[self.order[t - 1]]
            alphas = self.policy.alphas(self.subs) if self.subs is not None else None
            entry = {"stage": t, "label": f"+{name}", "domain": name}
            if self.subs is not None:
                entry["alpha"] = alphas
            ewc = self.ewc_state(model) if self.flags.ewc else None
            model = self.train_domain(model, t, alphas, ewc)
            model, verdict, steps = self.monitor(model, t, domain)
            entry["verdict"] = verdict.to_dict()
            entry["replay_steps"] = steps
            if steps > 2 * cfg.e_repair:
                raise InvariantError(f"replay bound violated at stage {t}: {steps} > 2*E_repair")

            if self.flags.ssi and self.flags.incremental:
                fresh = self.identify(model, t)
                merged = [merge_subspaces(o, f, cfg.rho, cfg.eig_backend) for o, f in zip(self.subs, fresh)]
                entry["fresh_stability"] = self._compare(self.fresh, fresh, f"theta{t - 1}->theta{t}")
                entry["stability"] = self._compare(self.subs, merged, f"theta{t - 1}->theta{t}")
                entry["spectrum"] = self.last_spectra
                self.fresh = fresh
                self.subs = merged
            if self.subs is not None:
                entry["subspace"] = self._subspace_entry(self.subs)
                self._save_subspaces(t)
            entry["metrics"] = self.metrics(model)
            stages.append(entry)
            self.models[t] = model

        if base_checksum(model) != self.checksum:
            raise InvariantError("frozen base weights changed during the run")
        if self.flags.ssi and self.flags.incremental and len(stages) > 1:
            stages[-1]["end_to_end_stability"] = self._compare_initial()
        self.final_model = model
        if self.artifacts is not None:
            self.artifacts.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, self.artifacts / "final_model.npz")
        return self._log(stages)

    def _compare_initial(self):
        return None if self._initial is None else self._compare(self._initial, self.subs, f"theta0->theta{self.cfg.domains}")

    def _subspace_entry(self, subs):
        if self._initial is None:
            self._initial = subs
        entry = {"k_s": [s.rank for s in subs], "fisher_trace": [s.fisher_trace for s in subs]}
        if self.artifacts is not None:
            entry["snapshot"] = None  # filled by _save_subspaces
        return entry

    def _save_subspaces(self, t: int) -> None:
        if self.artifacts is None or self.subs is None:
            return
        self.artifacts.mkdir(parents=True, exist_ok=True)
        save_subspaces(self.subs, self.artifacts / f"subspace_stage{t}.npz")

    def _log(self, stages: list[dict]) -> dict:
        refusal = [s["metrics"]["refusal"] for s in stages]
        composite = [s["metrics"]["composite"] for s in stages]
        verdicts = [s["verdict"] for s in stages if "verdict" in s]
        if self.artifacts is not None:
            for s in stages:
                if "subspace" in s:
                    s["subspace"]["snapshot"] = f"subspace_stage{s['stage']}.npz"
        log = {
            "schema": LOG_SCHEMA,
            "version": LOG_VERSION,
            "config": self.cfg.to_dict(),
            "seed": self.seed,
            "method": self.cfg.method,
            "domain_order": self.domain_names,
            "base_checksum": self.checksum,
            "base": {
                "s0": self.s0,
                "align_refusal": self.base.s0,
                "general": 100.0 * self.base.general,
                "domain_floor": 100.0 * self.base.domain_floor,
            },
            "stages": stages,
            "fisher_checks": self.fisher_checks,
            "final": {
                "refusal": refusal[-1],
                "composite": composite[-1],
                "domain": stages[-1]["metrics"]["domain"],
                "general": stages[-1]["metrics"]["general"],
                "slope_refusal": analytics.per_step_slope(refusal),
                "slope_composite": analytics.per_step_slope(composite),
                "triggers": sum(1 for v in verdicts if v["triggered"]),
                "replay_steps": sum(s.get("replay_steps", 0) for s in stages),
                "unrecovered": sum(1 for v in verdicts if v["status"] == "unrecovered"),
            },
        }
        if not self.cfg.reproducible:
            log["timings"] = dict(self.timings)
        return log


def run(config: RunConfig, seed: int | None = None, artifacts_dir=None) -> dict:
    seed = config.seeds[0] if seed is None else seed
    return Run(config, seed, artifacts_dir).execute()


def dumps_log(log: dict) -> str:
    return json.dumps(log, sort_keys=True, indent=1) + "\n"


def write_log(log: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps_log(log))


def read_log(path) -> dict:
    log = json.loads(Path(path).read_text())
    if log.get("schema") != LOG_SCHEMA or log.get("version") != LOG_VERSION:
        raise ValueError(f"{path} is not a version-{LOG_VERSION} run log")
    return log


# -- ablations ---------------------------------------------------------------

SENSITIVITY_AXES = {
    "rho": (0.80, 0.85, 0.90, 0.95),
    "tau": (0.02, 0.05, 0.10, 0.15),
    "n_s": (100, 250, 500, 1000),
}


def grid_configs(base: RunConfig, methods=None, axes=None) -> list[tuple[str, RunConfig]]:
    """Expand a grid: one entry per method, plus one-at-a-time sweeps of the
    sensitivity axes around ``base`` (each axis value replaces the default)."""
    out = []
    for m in methods or ():
        out.append((f"method={m}", base.with_(method=m)))
    for axis, values in (axes or {}).items():
        for v in values:
            out.append((f"{axis}={v}", base.with_(**{axis: type(getattr(base, axis))(v)})))
    if not out:
        out.append((f"method={base.method}", base))
    return out


def ablate(base: RunConfig, methods=None, axes=None, seeds=None, log_dir=None) -> dict:
    """Run every grid point over every seed; returns {label: [logs]} plus a summary."""
    seeds = tuple(seeds or base.seeds)
    results: dict[str, list[dict]] = {}
    for label, cfg in grid_configs(base, methods, axes):
        for s in seeds:
            log = run(cfg, s)
            results.setdefault(label, []).append(log)
            if log_dir is not None:
                write_log(log, Path(log_dir) / f"{label.replace('=', '_')}_seed{s}.json")
    return {"results": results, "summary": summarize(results)}


def summarize(results: dict[str, list[dict]]) -> dict:
    rows = {}
    for label, logs in results.items():
        fr = np.array([l["final"]["refusal"] for l in logs])
        fc = np.array([l["final"]["composite"] for l in logs])
        fd = np.array([l["final"]["domain"] for l in logs])
        rows[label] = {
            "n": len(logs),
            "refusal_mean": float(fr.mean()),
            "refusal_std": float(fr.std()),
            "safety_mean": float(fc.mean()),
            "safety_std": float(fc.std()),
            "domain_mean": float(fd.mean()),
            "domain_std": float(fd.std()),
            "triggers": int(sum(l["final"]["triggers"] for l in logs)),
        }
    return {"rows": rows, "flags": lattice_flags(rows)}


def lattice_flags(rows: dict) -> list[str]:
    """Direction-of-effect checks on seed-averaged final refusal; returns the inversions found."""
    get = lambda m: rows.get(f"method={m}", {}).get("refusal_mean")
    flags = []
    chain = [("unconstrained", "strict-osca", True), ("unconstrained", "adaptive-osca", True),
             ("adaptive-osca", "+anchor", False), ("+anchor", "+csm", False), ("no-incremental-ssi", "+csm", False)]
    for lo, hi, strict in chain:
        a, b = get(lo), get(hi)
        if a is None or b is None:
            continue
        if (strict and not a < b) or (not strict and not a <= b):
            flags.append(f"inversion: {lo} ({a:.2f}) {'<' if strict else '<='} {hi} ({b:.2f}) fails")
    for axis in SENSITIVITY_AXES:
        pts = sorted(
            ((float(k.split("=")[1]), v["refusal_mean"]) for k, v in rows.items() if k.startswith(axis + "=")),
        )
        if axis == "rho" and len(pts) > 1 and any(b[1] < a[1] for a, b in zip(pts, pts[1:])):
            flags.append("soft: safety not monotone non-decreasing in rho")
    return flags


def format_summary(summary: dict) -> str:
    lines = [f"{'config':<28} {'refusal':>14} {'safety':>14} {'domain':>14} {'trig':>5}"]
    for label, r in summary["rows"].items():
        lines.append(
            f"{label:<28} {r['refusal_mean']:7.2f}±{r['refusal_std']:<5.2f} {r['safety_mean']:7.2f}±{r['safety_std']:<5.2f} "
            f"{r['domain_mean']:7.2f}±{r['domain_std']:<5.2f} {r['triggers']:>5}"
        )
    for f in summary["flags"]:
        lines.append(f)
    return "\n".join(lines) + "\n"


# -- CSM repair sweep --------------------------------------------------------


def repair_sweep(config: RunConfig, seed: int, e_values=(50, 100, 200, 400), source: str = "unconstrained") -> list[dict]:
    """Replay from one fixed eroded state with different block lengths.

    The eroded state is the model after all domains under ``source`` (default:
    unconstrained training). Replay uses the safety subspace identified on the
    aligned base merged with a fresh one at the eroded state, the configured
    projection policy, and a single block of exactly ``E`` steps.
    """
    src = Run(config.with_(method=source), seed)
    src.execute()
    eroded = src.final_model
    last = config.domains
    domain = src.suite.domains[src.order[last - 1]]

    helper = Run(config.with_(method="safeanchor"), seed)
    helper.suite, helper.base, helper.order = src.suite, src.base, src.order
    helper.classifier_rng = substream(seed, "classifier")
    initial = helper.identify(src.models[0], 0)
    fresh = helper.identify(eroded, last)
    subs = [merge_subspaces(o, f, config.rho, config.eig_backend) for o, f in zip(initial, fresh)]
    policy = ProjectionPolicy("adaptive" if config.flags.mode == "off" else config.flags.mode, config.lam, config.trace_normalize)
    alphas = policy.alphas(subs)

    s_pre = evaluate_probe(eroded, src.suite.probe)
    dom_pre = float(np.mean([accuracy(eroded, src.suite.domain_evals[j]) for j in src.order]))
    rows = []
    for e in e_values:
        opt = make_optimizer(config.optimizer, config.learning_rate, config.adam_projection)
        rng = substream(seed, f"repair-sweep/{e}")
        m = replay_block(eroded, opt, domain, src.suite.calib, config.beta, int(e), rng, config.batch_size, subs, alphas, config.replay_safety)
        s_post = evaluate_probe(m, src.suite.probe)
        dom = float(np.mean([accuracy(m, src.suite.domain_evals[j]) for j in src.order]))
        rows.append(
            {
                "e_repair": int(e),
                "pre_safety": 100.0 * s_pre,
                "post_safety": 100.0 * s_post,
                "domain_delta": 100.0 * (dom - dom_pre),
                "steps": int(e),
            }
        )
    return rows
