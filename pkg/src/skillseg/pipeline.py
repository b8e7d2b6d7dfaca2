"""Artifact-level driver: every stage reads the files written by earlier
stages and writes its own, stamped with the config hash and seed."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .changepoint import second_difference, smooth
from .config import PipelineConfig, dump_config
from .dataset import (NormStats, SyntheticKitchenSpec, TrajectoryScaler, generate_synthetic, load_dataset,
                      read_provenance, save_dataset, train_test_split)
from .evqvae import EVQVAE, MacroSegmentation
from .exceptions import DependencyError, ProvenanceError, SkillSegError, StageError, UsageError
from .metrics import export_pca, pooled_boundary_f1, termination_accuracy
from .policy import SkillPolicy, TerminationClassifier
from .refine import Segmentation, SkillAssignment, SkillLibrary
from .seqvae import SeqVAE
from .stages import (METHOD_ROWS, Stage3Models, align_stage, fit_stage1, fit_stage2, fit_stage3,
                     fixture_skill_map, intrinsic_purity, macro_truth, mse_table, refine_stage, run_rollouts,
                     segment_stage1, shared_labels, split_stage2, termination_segments)

logger = logging.getLogger(__name__)

FILES = {
    "dataset": "dataset.jsonl",
    "split": "split.json",
    "stage1_model": "stage1_model.json",
    "stage1_segments": "stage1_segments.json",
    "entropy_csv": "entropy.csv",
    "stage2_model": "stage2_model.json",
    "stage2_candidates": "stage2_candidates.json",
    "error_csv": "error_curves.csv",
    "refined": "refined_segments.json",
    "final_segments": "final_segments.json",
    "library": "skill_library.json",
    "termination": "termination.json",
    "policy_onehot": "policy_onehot.json",
    "policy_embed": "policy_embed.json",
    "uncond_bc": "uncond_bc.json",
    "task_bc": "task_bc.json",
    "rollouts": "rollouts.jsonl",
    "report": "report.txt",
    "metrics": "metrics.json",
    "mse_csv": "mse.csv",
    "pca_csv": "pca.csv",
}

# stage name -> (inputs, outputs, exit code)
STAGES = {
    "generate": ((), ("dataset", "split"), 10),
    "ingest": ((), ("dataset", "split"), 11),
    "stage1-train": (("dataset", "split"), ("stage1_model",), 20),
    "stage1-segment": (("dataset", "split", "stage1_model"), ("stage1_segments", "entropy_csv"), 21),
    "stage2-train": (("dataset", "split", "stage1_segments"), ("stage2_model",), 30),
    "stage2-split": (("dataset", "split", "stage1_segments", "stage2_model"), ("stage2_candidates", "error_csv"), 31),
    "refine": (("dataset", "split", "stage2_model", "stage2_candidates"), ("refined",), 40),
    "align": (("dataset", "split", "stage2_model", "stage2_candidates", "refined"), ("final_segments", "library"), 41),
    "stage3-train": (("dataset", "split", "final_segments", "library"),
                     ("termination", "policy_onehot", "policy_embed", "uncond_bc", "task_bc"), 50),
    "rollout": (("dataset", "split", "final_segments", "library", "termination", "policy_onehot", "policy_embed"),
                ("rollouts",), 51),
    "evaluate": (("dataset", "split", "stage1_segments", "stage2_candidates", "final_segments", "library",
                  "termination", "policy_onehot", "policy_embed", "uncond_bc", "task_bc"),
                 ("report", "metrics", "mse_csv", "pca_csv"), 60),
}

POLICY_FILES = {"skill-onehot": "policy_onehot", "skill-embed": "policy_embed", "uncond-bc": "uncond_bc",
                "task-bc": "task_bc"}


def stage_order(config: PipelineConfig) -> list:
    first = "generate" if config.data.source == "synthetic" else "ingest"
    rest = ["stage1-train", "stage1-segment", "stage2-train", "stage2-split", "refine", "align", "stage3-train"]
    tail = ["rollout", "evaluate"] if config.data.source == "synthetic" else ["evaluate"]
    return [first] + rest + tail


# artifact store ----------------------------------------------------------------------

class Run:
    """One output directory bound to one config and seed."""

    def __init__(self, config: PipelineConfig, out_dir):
        self.config = config.validate()
        self.out = Path(out_dir)
        self.hash = config.hash()
        self.seed = int(config.seed)

    def path(self, key: str) -> Path:
        return self.out / FILES[key]

    def stamp(self, stage: str) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "stage": stage}

    # writing -------------------------------------------------------------
    def _write_text(self, key: str, text: str):
        self.out.mkdir(parents=True, exist_ok=True)
        tmp = self.path(key).with_suffix(".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, self.path(key))

    def write_json(self, key: str, stage: str, payload: dict):
        doc = {"provenance": self.stamp(stage), **payload}
        self._write_text(key, json.dumps(doc, sort_keys=True) + "\n")

    def write_csv(self, key: str, stage: str, text: str):
        s = self.stamp(stage)
        self._write_text(key, f"# config_hash={s['config_hash']} seed={s['seed']} stage={stage}\n" + text)

    def write_jsonl(self, key: str, stage: str, records):
        lines = [json.dumps({"_provenance": self.stamp(stage)}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in records]
        self._write_text(key, "\n".join(lines) + "\n")

    # reading -------------------------------------------------------------
    def provenance(self, key: str) -> dict | None:
        p = self.path(key)
        if not p.exists():
            return None
        if p.suffix == ".json":
            with open(p, encoding="utf-8") as f:
                return json.load(f).get("provenance")
        if p.suffix == ".jsonl":
            return read_provenance(p)
        with open(p, encoding="utf-8") as f:
            first = f.readline()
        if not first.startswith("# "):
            return None
        fields = dict(item.split("=", 1) for item in first[2:].split())
        return {"config_hash": fields.get("config_hash"), "seed": int(fields.get("seed", -1)),
                "stage": fields.get("stage")}

    def require(self, keys, stage: str):
        """Inputs must exist and carry this run's hash and seed."""
        missing = [FILES[k] for k in keys if not self.path(k).exists()]
        if missing:
            raise DependencyError(f"{stage}: missing upstream artifacts {missing} in {self.out}; "
                                  f"run the earlier stages first")
        stamps = {}
        for k in keys:
            prov = self.provenance(k)
            if prov is None:
                raise ProvenanceError(f"{stage}: {FILES[k]} has no provenance stamp")
            stamps[FILES[k]] = (prov.get("config_hash"), prov.get("seed"))
        if len(set(stamps.values())) > 1:
            raise ProvenanceError(f"{stage}: inputs come from different runs: {stamps}")
        found = next(iter(stamps.values()), (self.hash, self.seed))
        if found != (self.hash, self.seed):
            raise ProvenanceError(f"{stage}: inputs were produced with config hash {found[0]} and seed {found[1]}, "
                                  f"current run is {self.hash} seed {self.seed}; rerun the upstream stages")

    def up_to_date(self, stage: str) -> bool:
        _, outputs, _ = STAGES[stage]
        for k in outputs:
            prov = self.provenance(k)
            if prov is None or (prov.get("config_hash"), prov.get("seed")) != (self.hash, self.seed):
                return False
        return True

    def read_json(self, key: str) -> dict:
        with open(self.path(key), encoding="utf-8") as f:
            return json.load(f)


# loaders -------------------------------------------------------------------------------

@dataclass
class DataBundle:
    raw: list
    normalized: list
    scaler: TrajectoryScaler
    train: list
    test: list


def load_data(run: Run) -> DataBundle:
    raw = load_dataset(run.path("dataset"))
    split = run.read_json("split")
    scaler = TrajectoryScaler.from_stats(NormStats.from_dict(split["norm"]))
    return DataBundle(raw, scaler.transform(raw), scaler, list(split["train"]), list(split["test"]))


def load_model(run: Run, key: str, cls):
    doc = run.read_json(key)
    return cls.from_state_dict(doc["state"])


def load_macro(run: Run) -> list:
    return [MacroSegmentation.from_dict(d) for d in run.read_json("stage1_segments")["segmentations"]]


def load_candidates(run: Run):
    doc = run.read_json("stage2_candidates")
    segs = [Segmentation.from_dict(d) for d in doc["segmentations"]]
    curves = [np.array(c, dtype=np.float64) for c in doc["curves"]]
    return segs, curves


def load_assignment(run: Run):
    doc = run.read_json("final_segments")
    segs = [Segmentation.from_dict(d["segmentation"]) for d in doc["trajectories"]]
    embeddings = [np.array(d["embeddings"], dtype=np.float64) for d in doc["trajectories"]]
    lib_doc = run.read_json("library")
    library = SkillLibrary.from_dict(lib_doc["library"])
    raw = {(int(i), int(j)): int(k) for i, j, k in lib_doc["intrinsic_raw"]}
    return SkillAssignment(library, segs, raw), embeddings, lib_doc


def load_stage3(run: Run) -> Stage3Models:
    doc = run.read_json("termination")
    term = TerminationClassifier.from_state_dict(doc["state"])
    timeouts = {int(k): int(v) for k, v in doc["timeouts"].items()}
    policies = {m: load_model(run, POLICY_FILES[m], SkillPolicy) for m in POLICY_FILES
                if run.path(POLICY_FILES[m]).exists()}
    return Stage3Models(term, policies, timeouts)


def synthetic_spec(config: PipelineConfig) -> SyntheticKitchenSpec:
    return SyntheticKitchenSpec(noise=config.data.noise)


# stages ----------------------------------------------------------------------------------

def _write_split(run: Run, stage: str, raw):
    d = run.config.data
    train, test = train_test_split(raw, d.test_fraction, run.seed)
    scaler = TrajectoryScaler().fit([raw[i] for i in train])
    run.write_json("split", stage, {"train": train, "test": test, "norm": scaler.stats_.to_dict()})


def stage_generate(run: Run):
    if run.config.data.source != "synthetic":
        raise UsageError("generate needs data.source = 'synthetic'; use ingest for files")
    raw = generate_synthetic(synthetic_spec(run.config), run.config.data.demos_per_task, run.seed)
    save_dataset(raw, run.path("dataset"), provenance=run.stamp("generate"))
    _write_split(run, "generate", raw)


def stage_ingest(run: Run):
    path = run.config.data.path
    if not path:
        raise UsageError("ingest needs data.path")
    raw = load_dataset(path)
    if len(raw) < 2:
        raise UsageError(f"{path}: need at least 2 trajectories, found {len(raw)}")
    run.out.mkdir(parents=True, exist_ok=True)
    save_dataset(raw, run.path("dataset"), provenance=run.stamp("ingest"))
    _write_split(run, "ingest", raw)


def stage1_train(run: Run):
    data = load_data(run)
    model = fit_stage1(data.normalized, run.config, run.seed)
    run.write_json("stage1_model", "stage1-train", {
        "kind": "evqvae", "state": model.state_dict(), "history": model.history_,
        "holdout": {"initial": model.initial_holdout_, "final": model.final_holdout_}})


def entropy_csv(traces, macro) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = traces[0].probs.shape[1] if traces else 0
    w.writerow(["traj", "t", "entropy", "log_entropy", "change_point"] + [f"log_p{j + 1}" for j in range(k)])
    for i, (tr, m) in enumerate(zip(traces, macro)):
        cps = set(m.change_points)
        lp = tr.log_probs
        for t in range(len(tr)):
            w.writerow([i, t, f"{tr.entropy[t]:.10g}", f"{tr.log_entropy[t]:.10g}", int(t in cps)]
                       + [f"{v:.10g}" for v in lp[t]])
    return buf.getvalue()


def stage1_segment(run: Run):
    data = load_data(run)
    model = load_model(run, "stage1_model", EVQVAE)
    traces, macro, threshold = segment_stage1(model, data.normalized, run.config)
    run.write_json("stage1_segments", "stage1-segment", {
        "threshold": threshold, "segmentations": [m.to_dict() for m in macro]})
    run.write_csv("entropy_csv", "stage1-segment", entropy_csv(traces, macro))


def stage2_train(run: Run):
    data = load_data(run)
    model = fit_stage2(data.normalized, load_macro(run), run.config, run.seed)
    run.write_json("stage2_model", "stage2-train", {
        "kind": "seqvae", "state": model.state_dict(), "history": model.history_,
        "holdout": {"initial": model.initial_holdout_, "final": model.final_holdout_}})


def error_csv(curves, macro, window: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["traj", "segment", "t", "error", "smoothed", "d2"])
    for i, (curve, m) in enumerate(zip(curves, macro)):
        for j, (a, b) in enumerate(m.segments()):
            part = curve[a:b]
            sm = smooth(part, window)
            d2 = second_difference(sm)
            for t in range(a, b):
                w.writerow([i, j, t, f"{part[t - a]:.10g}", f"{sm[t - a]:.10g}", f"{d2[t - a]:.10g}"])
    return buf.getvalue()


def stage2_split(run: Run):
    data = load_data(run)
    macro = load_macro(run)
    model = load_model(run, "stage2_model", SeqVAE)
    segs, curves = split_stage2(model, data.normalized, macro, run.config)
    run.write_json("stage2_candidates", "stage2-split", {
        "segmentations": [s.to_dict() for s in segs],
        "candidates": [[[int(c), "stage2-candidate"] for c in s.soft] for s in segs],
        "curves": [c.tolist() for c in curves],
    })
    run.write_csv("error_csv", "stage2-split", error_csv(curves, macro, run.config.stage2.smooth_window))


def stage_refine(run: Run):
    data = load_data(run)
    model = load_model(run, "stage2_model", SeqVAE)
    segs, _ = load_candidates(run)
    refined = refine_stage(model, data.normalized, segs, run.config, run.seed)
    run.write_json("refined", "refine", {"segmentations": [s.to_dict() for s in refined]})


def stage_align(run: Run):
    data = load_data(run)
    model = load_model(run, "stage2_model", SeqVAE)
    _, curves = load_candidates(run)
    refined = [Segmentation.from_dict(d) for d in run.read_json("refined")["segmentations"]]
    res = align_stage(model, data.normalized, refined, curves, run.config, run.seed)
    a = res.assignment
    trajectories = []
    for seg, emb in zip(a.segmentations, res.embeddings):
        trajectories.append({
            "segmentation": seg.to_dict(),
            "split_indices": seg.splits,
            "state_boundaries": seg.state_boundaries(),
            "skills": [int(k) for k in seg.labels],
            "tags": ["intrinsic" if a.library.is_intrinsic(k) else "extrinsic" for k in seg.labels],
            "embeddings": emb.tolist(),
        })
    run.write_json("final_segments", "align", {"trajectories": trajectories})
    run.write_json("library", "align", {
        "library": a.library.to_dict(),
        "canonical_clusters": {str(t): [int(x) for x in c] for t, c in sorted(res.canonical.items())},
        "intrinsic_raw": [[i, j, k] for (i, j), k in sorted(a.intrinsic_raw.items())],
    })


def stage3_train(run: Run):
    data = load_data(run)
    assignment, embeddings, _ = load_assignment(run)
    models = fit_stage3(data.normalized, assignment, embeddings, data.train, run.config, run.seed)
    s3 = run.config.stage3
    run.write_json("termination", "stage3-train", {
        "kind": "termination", "state": models.termination.state_dict(),
        "timeouts": {str(k): v for k, v in sorted(models.timeouts.items())},
        "threshold": s3.threshold, "grace_steps": s3.grace_steps})
    for method, key in POLICY_FILES.items():
        run.write_json(key, "stage3-train", {"kind": "policy", "method": method,
                                             "state": models.policies[method].state_dict()})


def rollout_programs(run: Run, assignment: SkillAssignment, dataset) -> list:
    """``(name, skill program, target fixtures)`` for every training task and
    the configured novel program."""
    spec = synthetic_spec(run.config)
    out = [(f"task-{t}", list(assignment.library.programs[t].skills), list(spec.tasks[t]))
           for t in sorted(assignment.library.programs)]
    fmap = fixture_skill_map(assignment, dataset)
    novel = [int(f) for f in run.config.stage3.novel_fixtures]
    missing = [f for f in novel if f not in fmap]
    if missing:
        raise UsageError(f"novel program uses fixtures {missing} that no discovered skill covers")
    out.append(("novel", [fmap[f] for f in novel], novel))
    return out


def stage_rollout(run: Run):
    if run.config.data.source != "synthetic":
        raise UsageError("rollouts need the synthetic environment")
    data = load_data(run)
    assignment, _, _ = load_assignment(run)
    models = load_stage3(run)
    spec = synthetic_spec(run.config)
    records = []
    for method in ("skill-onehot", "skill-embed"):
        for name, program, fixtures in rollout_programs(run, assignment, data.normalized):
            traces = run_rollouts(models, spec, data.scaler, program, fixtures, run.config, run.seed, method)
            for r, tr in enumerate(traces):
                records.append({"method": method, "program_name": name, "program": program,
                                "fixtures": fixtures, "episode": r, **tr.to_dict()})
    run.write_jsonl("rollouts", "rollout", records)


def read_rollouts(run: Run) -> list:
    with open(run.path("rollouts"), encoding="utf-8") as f:
        return [r for r in (json.loads(line) for line in f if line.strip()) if "_provenance" not in r]


def rollout_summary(records) -> dict:
    """``{method: {program_name: success rate}}``."""
    acc: dict = {}
    for r in records:
        acc.setdefault(r["method"], {}).setdefault(r["program_name"], []).append(bool(r["success"]))
    return {m: {p: float(np.mean(v)) for p, v in sorted(progs.items())} for m, progs in sorted(acc.items())}


def _score(score) -> dict:
    return {"precision": score.precision, "recall": score.recall, "f1": score.f1}


def compute_metrics(run: Run) -> dict:
    data = load_data(run)
    ds = data.normalized
    cfg = run.config
    tol = cfg.stage3.boundary_tolerance
    macro = load_macro(run)
    cand, _ = load_candidates(run)
    assignment, embeddings, lib_doc = load_assignment(run)
    models = load_stage3(run)
    has_gt = all(t.gt_boundaries is not None for t in ds)
    out: dict = {"config_hash": run.hash, "seed": run.seed, "n_trajectories": len(ds),
                 "n_train": len(data.train), "n_test": len(data.test),
                 "programs": lib_doc["library"]["programs"], "n_skills": assignment.library.n_skills}
    if has_gt:
        shared = shared_labels(ds)
        if shared:
            out["macro_boundaries"] = _score(pooled_boundary_f1(
                [([c + 1 for c in m.change_points], macro_truth(t, shared)) for m, t in zip(macro, ds)], tol))
        interior = [t.gt_boundaries[:-1] for t in ds]
        out["candidate_boundaries"] = _score(pooled_boundary_f1(
            [(s.state_boundaries()[:-1], g) for s, g in zip(cand, interior)], tol))
        out["final_boundaries"] = _score(pooled_boundary_f1(
            [(s.state_boundaries()[:-1], g) for s, g in zip(assignment.segmentations, interior)], tol))
        out["termination_accuracy"] = termination_accuracy(
            models.termination.termination_probability, termination_segments(ds, data.test),
            cfg.stage3.threshold, tol, cfg.stage3.grace_steps)
        if all(t.gt_labels is not None for t in ds) and assignment.library.n_intrinsic > 0:
            out["intrinsic_purity"] = intrinsic_purity(assignment, ds)
    table = mse_table(models, ds, assignment, embeddings, data.test)
    out["mse"] = {r.method: {"average": r.average,
                             "per_task": {str(t): list(v) for t, v in sorted(r.per_task.items())}}
                  for r in table.rows}
    out["_mse_table"] = table
    if run.path("rollouts").exists():
        out["rollouts"] = rollout_summary(read_rollouts(run))
    return out


def report_text(m: dict, table) -> str:
    lines = [f"skillseg report  config_hash={m['config_hash']}  seed={m['seed']}",
             f"trajectories: {m['n_trajectories']} (train {m['n_train']}, test {m['n_test']}); "
             f"skills: {m['n_skills']}",
             "programs: " + "; ".join(f"task {t}: {p}" for t, p in sorted(m["programs"].items())), ""]
    for key, label in (("macro_boundaries", "stage-1 macro boundaries"),
                       ("candidate_boundaries", "stage-2 candidate boundaries"),
                       ("final_boundaries", "final boundaries")):
        if key in m:
            s = m[key]
            lines.append(f"{label:<30} P={s['precision']:.4f} R={s['recall']:.4f} F1={s['f1']:.4f}")
    if "intrinsic_purity" in m:
        lines.append(f"{'intrinsic cluster purity':<30} {m['intrinsic_purity']:.4f}")
    if "termination_accuracy" in m:
        lines.append(f"{'termination accuracy (+/-tol)':<30} {m['termination_accuracy']:.4f}")
    lines += ["", table.to_text().rstrip("\n")]
    if "rollouts" in m:
        lines += ["", "rollout success rate"]
        for method, progs in m["rollouts"].items():
            lines.append(f"  {method:<14}" + "  ".join(f"{p}={v:.2f}" for p, v in progs.items()))
    return "\n".join(lines) + "\n"


def stage_evaluate(run: Run):
    if run.config.data.source == "synthetic":
        run.require(["rollouts"], "evaluate")
    m = compute_metrics(run)
    table = m.pop("_mse_table")
    text = report_text(m, table)
    assignment, embeddings, _ = load_assignment(run)
    labels = [k for s in assignment.segmentations for k in s.labels]
    _, pca = export_pca(np.vstack(embeddings), labels, assignment.library.centroids)
    run.write_json("metrics", "evaluate", {"metrics": m})
    run.write_csv("mse_csv", "evaluate", table.to_csv())
    run.write_csv("pca_csv", "evaluate", pca)
    run._write_text("report", f"# config_hash={run.hash} seed={run.seed} stage=evaluate\n" + text)


STAGE_FUNCS = {
    "generate": stage_generate, "ingest": stage_ingest, "stage1-train": stage1_train,
    "stage1-segment": stage1_segment, "stage2-train": stage2_train, "stage2-split": stage2_split,
    "refine": stage_refine, "align": stage_align, "stage3-train": stage3_train, "rollout": stage_rollout,
    "evaluate": stage_evaluate,
}


def run_stage(run: Run, stage: str, force: bool = False) -> bool:
    """Run one stage; returns False when it was skipped as up to date."""
    if stage not in STAGE_FUNCS:
        raise UsageError(f"unknown stage {stage!r}")
    inputs, _, code = STAGES[stage]
    run.require(inputs, stage)
    if not force and run.up_to_date(stage):
        logger.info("%s: up to date", stage)
        return False
    logger.info("%s: running", stage)
    try:
        STAGE_FUNCS[stage](run)
    except (DependencyError, ProvenanceError):
        raise
    except (SkillSegError, AssertionError, FloatingPointError, ValueError) as exc:
        raise StageError(stage, code, exc) from exc
    return True


def run_pipeline(config: PipelineConfig, out_dir, force: bool = False) -> Run:
    """Every stage in order; completed stages with matching stamps are skipped."""
    run = Run(config, out_dir)
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "config.yaml").write_text(dump_config(config), encoding="utf-8")
    for stage in stage_order(config):
        run_stage(run, stage, force)
    return run


def read_report(out_dir) -> str:
    return (Path(out_dir) / FILES["report"]).read_text(encoding="utf-8")


__all__ = ["FILES", "STAGES", "METHOD_ROWS", "Run", "run_pipeline", "run_stage", "stage_order", "compute_metrics",
           "read_report", "rollout_summary", "read_rollouts"]
