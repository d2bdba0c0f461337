"""Staged pipeline with a resume ledger.

Every stage records a digest of its own config slice plus its predecessors'
digests, along with the files it wrote. A stage re-runs only when its digest
changed or an output is missing, so deleting a late artifact and re-running
regenerates it byte-identically; running a stage whose prerequisites are
absent or stale is a stage-order violation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os

import numpy as np

from . import segmetrics, uqstats
from .ensemble import (
    BagPlan,
    SelectionReport,
    brier_matrix,
    build_combiner_inputs,
    combiner_model_config,
    correlation_matrix,
    make_bag_plan,
    member_probability_maps,
    select_members,
    train_candidates,
    train_combiner,
)
from .errors import ConfigError, EvaluationError, StageOrderError
from .imageio import write_pfm, write_pgm
from .nn import load_weights, mc_predict, save_weights, train, weights_to_module
from .phantom import generate_dataset, load_manifest, load_roi, load_split
from .plots import Series, svg_line_plot
from .runconfig import RunConfig
from .seeds import derive_seed

MODEL_NAMES = ("baseline", "ensemble")
_N_MAP_RENDERS = 8
_KDE_GRID_POINTS = 512
_KDE_SAMPLE_CAP = 100_000
_THRESHOLD = 0.5


class RunPaths:
    """Filesystem layout of one run directory."""

    def __init__(self, out_dir: str):
        self.root = os.fspath(out_dir)
        self.ledger = os.path.join(self.root, "ledger.json")
        self.config_echo = os.path.join(self.root, "config.json")
        self.data = os.path.join(self.root, "data")
        self.baseline = os.path.join(self.root, "baseline")
        self.candidates = os.path.join(self.root, "candidates")
        self.selection = os.path.join(self.root, "selection")
        self.combiner = os.path.join(self.root, "combiner")
        self.report = os.path.join(self.root, "report")

    def candidate_dir(self, index: int) -> str:
        return os.path.join(self.candidates, f"{index:03d}")

    def eval_dir(self, model_name: str) -> str:
        return os.path.join(self.root, "eval", model_name)


class RunLedger:
    def __init__(self, path: str):
        self.path = path
        self.stages: dict[str, dict] = {}
        if os.path.exists(path):
            with open(path, encoding="ascii") as f:
                self.stages = json.load(f).get("stages", {})

    def get(self, stage: str) -> dict | None:
        return self.stages.get(stage)

    def record(self, stage: str, digest: str, outputs: list[str]) -> None:
        self.stages[stage] = {"digest": digest, "outputs": outputs}
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        with open(self.path, "w", encoding="ascii") as f:
            json.dump({"stages": self.stages}, f, sort_keys=True, indent=1)
            f.write("\n")


def _stage_digest(name: str, payload: dict, *deps: str) -> str:
    doc = {"stage": name, "payload": payload, "deps": list(deps)}
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("ascii")).hexdigest()[:16]


def _outputs_exist(root: str, outputs: list[str]) -> bool:
    return all(os.path.exists(os.path.join(root, rel)) for rel in outputs)


def _require(ledger: RunLedger, paths: RunPaths, stage: str, expected_digest: str) -> None:
    rec = ledger.get(stage)
    if rec is None:
        raise StageOrderError(f"stage order violation: '{stage}' has not run yet")
    if rec["digest"] != expected_digest:
        raise StageOrderError(
            f"stage order violation: '{stage}' artifacts are stale for the current config; re-run it"
        )
    if not _outputs_exist(paths.root, rec.get("outputs", [])):
        raise StageOrderError(
            f"stage order violation: outputs of '{stage}' are missing; re-run it"
        )


class Pipeline:
    """Binds a RunConfig to its run directory and executes stages."""

    def __init__(self, config: RunConfig):
        config.validate()
        self.config = config
        self.paths = RunPaths(config.out_dir)
        self.ledger = RunLedger(self.paths.ledger)

    # -- digests -----------------------------------------------------------

    def _d_generate(self) -> str:
        return _stage_digest("generate-data", dataclasses.asdict(self.config.phantom) | {})

    def _model_train_payload(self) -> dict:
        return {
            "model": dataclasses.asdict(self.config.model),
            "train": dataclasses.asdict(self.config.train),
            "master_seed": self.config.master_seed,
        }

    def _d_baseline(self) -> str:
        payload = self._model_train_payload() | {"t_passes": self.config.t_passes}
        return _stage_digest("train-baseline", payload, self._d_generate())

    def _d_candidates(self) -> str:
        payload = self._model_train_payload() | {"m": self.config.ensemble.m_candidates}
        return _stage_digest("train-candidates", payload, self._d_generate())

    def _d_select(self) -> str:
        e = self.config.ensemble
        payload = {"policy": e.policy, "top_k": e.top_k, "theta": e.theta}
        return _stage_digest("select", payload, self._d_candidates())

    def _d_combiner(self) -> str:
        payload = {"include_image_channel": self.config.ensemble.include_image_channel}
        return _stage_digest("train-combiner", payload, self._d_select())

    def _d_evaluate(self, model_name: str) -> str:
        payload = {
            "divergence": dataclasses.asdict(self.config.divergence),
            "gamma": self.config.gamma,
            "b_replicates": self.config.b_replicates,
            "ci_level": self.config.ci_level,
            "t_passes": self.config.t_passes,
            "master_seed": self.config.master_seed,
        }
        dep = self._d_baseline() if model_name == "baseline" else self._d_combiner()
        return _stage_digest(f"evaluate-{model_name}", payload, dep)

    # -- helpers -----------------------------------------------------------

    def _echo_config(self) -> None:
        os.makedirs(self.paths.root, exist_ok=True)
        with open(self.paths.config_echo, "w", encoding="ascii") as f:
            f.write(self.config.to_json())

    def _maybe_skip(self, stage: str, digest: str) -> bool:
        rec = self.ledger.get(stage)
        if rec and rec["digest"] == digest and _outputs_exist(self.paths.root, rec.get("outputs", [])):
            print(f"[{stage}] up-to-date, skipping")
            return True
        return False

    def _load_data(self, split: str):
        manifest = load_manifest(self.paths.data)
        return manifest, load_split(self.paths.data, manifest, split)

    def _train_seed(self) -> int:
        return derive_seed(self.config.master_seed, "train")

    # -- stages ------------------------------------------------------------

    def generate_data(self) -> bool:
        digest = self._d_generate()
        if self._maybe_skip("generate-data", digest):
            return False
        manifest = generate_dataset(self.config.phantom, self.paths.data)
        self._echo_config()
        outputs = ["data/manifest.json", "data/roi.pgm"]
        self.ledger.record("generate-data", digest, outputs)
        n = sum(len(v) for v in manifest.splits.values())
        print(f"[generate-data] wrote {n} samples under {self.paths.data}")
        print(os.path.join(self.paths.data, "manifest.json"))
        return True

    def train_baseline(self) -> bool:
        digest = self._d_baseline()
        if self._maybe_skip("train-baseline", digest):
            return False
        _require(self.ledger, self.paths, "generate-data", self._d_generate())
        manifest = load_manifest(self.paths.data)
        train_x, train_y = load_split(self.paths.data, manifest, "train")
        vs1_x, vs1_y = load_split(self.paths.data, manifest, "vs1")

        cfg = dataclasses.replace(self.config.train, seed=self._train_seed())
        result = train(self.config.model, train_x, train_y, vs1_x, vs1_y, cfg)
        os.makedirs(self.paths.baseline, exist_ok=True)
        save_weights(result.weights, self.paths.baseline)
        with open(os.path.join(self.paths.baseline, "history.csv"), "w", encoding="ascii") as f:
            f.write(result.history_csv())

        model = weights_to_module(result.weights, self.config.model)
        self._quick_eval(model, self.paths.baseline, "baseline", manifest)
        self._echo_config()
        outputs = [
            "baseline/weights.json",
            "baseline/weights.bin",
            "baseline/history.csv",
            "baseline/metrics.json",
        ]
        self.ledger.record("train-baseline", digest, outputs)
        print(
            f"[train-baseline] stopped at epoch {result.stopped_epoch} "
            f"(best {result.best_epoch}); weights in {self.paths.baseline}"
        )
        return True

    def _quick_eval(self, model, out_dir: str, model_name: str, manifest) -> None:
        """Post-training summary on the test split: metrics + uncertainty pools."""
        test_x, test_y = load_split(self.paths.data, manifest, "test")
        roi = load_roi(self.paths.data)
        outs = mc_predict(
            model,
            test_x,
            self.config.t_passes,
            seed=derive_seed(self.config.master_seed, "mc-eval", model_name),
        )
        self._write_metrics(outs, test_y, roi, manifest.splits["test"], out_dir, model_name)

    def _write_metrics(self, outs, test_y, roi, ids, out_dir, model_name) -> dict:
        os.makedirs(out_dir, exist_ok=True)
        per_image = [
            segmetrics.metric_set(segmetrics.confusion(o.prob_mean, y, roi, _THRESHOLD))
            for o, y in zip(outs, test_y)
        ]
        aggregate, skipped = segmetrics.mean_over_test(per_image)
        curve = segmetrics.pr_curve([o.prob_mean for o in outs], test_y, roi)
        correct, incorrect = segmetrics.split_uncertainty(outs, test_y, roi, _THRESHOLD)

        lines = ["id," + ",".join(segmetrics.METRIC_NAMES)]
        for sid, m in zip(ids, per_image):
            lines.append(sid + "," + ",".join(f"{getattr(m, n):.6f}" for n in segmetrics.METRIC_NAMES))
        lines.append(
            "mean," + ",".join(f"{getattr(aggregate, n):.6f}" for n in segmetrics.METRIC_NAMES)
        )
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="ascii") as f:
            f.write("\n".join(lines) + "\n")

        mask = roi == 1
        prevalence = float(np.mean([y[mask].mean() for y in test_y]))
        doc = {
            "model": model_name,
            "config_digest": self.config.digest(),
            "t_passes": self.config.t_passes,
            "threshold": _THRESHOLD,
            "n_images": len(ids),
            "aggregate": aggregate.as_dict(),
            "skipped": skipped,
            "average_precision": curve.average_precision,
            "positive_prevalence": prevalence,
            "pool_sizes": {"correct": len(correct), "incorrect": len(incorrect)},
        }
        with open(os.path.join(out_dir, "metrics.json"), "w", encoding="ascii") as f:
            json.dump(doc, f, sort_keys=True, indent=1)
            f.write("\n")
        np.save(os.path.join(out_dir, "pools_correct.npy"), correct.values.astype(np.float32))
        np.save(os.path.join(out_dir, "pools_incorrect.npy"), incorrect.values.astype(np.float32))
        with open(os.path.join(out_dir, "pr_curve.csv"), "w", encoding="ascii") as f:
            f.write("threshold,precision,recall\n")
            for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
                f.write(f"{t:.6f},{p:.6f},{r:.6f}\n")
        return {"outs": outs, "curve": curve, "correct": correct, "incorrect": incorrect}

    def train_candidates_stage(self) -> bool:
        digest = self._d_candidates()
        if self._maybe_skip("train-candidates", digest):
            return False
        _require(self.ledger, self.paths, "generate-data", self._d_generate())
        manifest = load_manifest(self.paths.data)
        train_x, train_y = load_split(self.paths.data, manifest, "train")
        vs1_x, vs1_y = load_split(self.paths.data, manifest, "vs1")

        cfg = dataclasses.replace(self.config.train, seed=self._train_seed())
        plan = make_bag_plan(
            len(train_x),
            self.config.ensemble.m_candidates,
            derive_seed(self.config.master_seed, "bagging"),
        )
        os.makedirs(self.paths.candidates, exist_ok=True)
        with open(os.path.join(self.paths.candidates, "bagplan.json"), "w", encoding="ascii") as f:
            json.dump(
                {
                    "n_tr": plan.n_tr,
                    "m_candidates": plan.m_candidates,
                    "seed": plan.seed,
                    "index_lists": [lst.tolist() for lst in plan.index_lists],
                },
                f,
                sort_keys=True,
            )
            f.write("\n")
        results = train_candidates(
            plan, self.config.model, cfg, train_x, train_y, vs1_x, vs1_y,
            workers=self.config.threads,
        )
        outputs = ["candidates/bagplan.json"]
        for i, result in enumerate(results):
            cdir = self.paths.candidate_dir(i)
            save_weights(result.weights, cdir)
            with open(os.path.join(cdir, "history.csv"), "w", encoding="ascii") as f:
                f.write(result.history_csv())
            rel = os.path.relpath(cdir, self.paths.root)
            outputs += [f"{rel}/weights.json", f"{rel}/weights.bin", f"{rel}/history.csv"]
            print(
                f"[train-candidates] candidate {i}: stopped epoch {result.stopped_epoch}, "
                f"best {result.best_epoch}, vs1 {result.history[result.best_epoch - 1].vs1_loss:.5f}"
            )
        self._echo_config()
        self.ledger.record("train-candidates", digest, outputs)
        return True

    def _load_bag_plan(self) -> BagPlan:
        with open(os.path.join(self.paths.candidates, "bagplan.json"), encoding="ascii") as f:
            doc = json.load(f)
        return BagPlan(
            n_tr=doc["n_tr"],
            m_candidates=doc["m_candidates"],
            seed=doc["seed"],
            index_lists=[np.asarray(lst, dtype=np.int64) for lst in doc["index_lists"]],
        )

    def _load_candidate_models(self, indices=None):
        m = self.config.ensemble.m_candidates
        indices = range(m) if indices is None else indices
        return [
            weights_to_module(load_weights(self.paths.candidate_dir(i)), self.config.model)
            for i in indices
        ]

    def select(self) -> bool:
        digest = self._d_select()
        if self._maybe_skip("select", digest):
            return False
        _require(self.ledger, self.paths, "train-candidates", self._d_candidates())
        manifest = load_manifest(self.paths.data)
        vs2_x, vs2_y = load_split(self.paths.data, manifest, "vs2")
        roi = load_roi(self.paths.data)

        models = self._load_candidate_models()
        e_matrix = brier_matrix(models, vs2_x, vs2_y, roi)
        r_matrix = correlation_matrix(e_matrix)
        report = select_members(
            r_matrix,
            policy=self.config.ensemble.policy,
            top_k=self.config.ensemble.top_k,
            theta=self.config.ensemble.theta,
        )
        os.makedirs(self.paths.selection, exist_ok=True)
        np.savetxt(
            os.path.join(self.paths.selection, "brier_matrix.csv"),
            e_matrix,
            delimiter=",",
            fmt="%.8f",
        )
        with open(os.path.join(self.paths.selection, "selection.json"), "w", encoding="ascii") as f:
            f.write(report.to_json())

        print("[select] plural-correlation coefficients:")
        for i, (v, c) in enumerate(zip(report.rho2, report.clamped)):
            mark = " *" if i in report.selected else ""
            clamp = " (clamped)" if c else ""
            print(f"  candidate {i:2d}: rho2 = {v:.6f}{clamp}{mark}")
        print(f"[select] policy {report.policy}={report.policy_value:g} "
              f"selected members: {report.selected}")
        self._echo_config()
        self.ledger.record(
            "select", digest, ["selection/selection.json", "selection/brier_matrix.csv"]
        )
        return True

    def load_selection(self) -> SelectionReport:
        with open(os.path.join(self.paths.selection, "selection.json"), encoding="ascii") as f:
            return SelectionReport.from_json(f.read())

    def train_combiner_stage(self) -> bool:
        digest = self._d_combiner()
        if self._maybe_skip("train-combiner", digest):
            return False
        _require(self.ledger, self.paths, "select", self._d_select())
        manifest = load_manifest(self.paths.data)
        train_x, train_y = load_split(self.paths.data, manifest, "train")
        vs1_x, vs1_y = load_split(self.paths.data, manifest, "vs1")

        report = self.load_selection()
        members = self._load_candidate_models(report.selected)
        maps_train = member_probability_maps(members, train_x)
        maps_vs1 = member_probability_maps(members, vs1_x)
        include = self.config.ensemble.include_image_channel
        cfg = dataclasses.replace(self.config.train, seed=self._train_seed())
        result = train_combiner(
            maps_train,
            train_y,
            maps_vs1,
            vs1_y,
            self.config.model,
            cfg,
            train_images=train_x if include else None,
            vs1_images=vs1_x if include else None,
        )
        save_weights(result.weights, self.paths.combiner)
        with open(os.path.join(self.paths.combiner, "history.csv"), "w", encoding="ascii") as f:
            f.write(result.history_csv())
        self._echo_config()
        self.ledger.record(
            "train-combiner",
            digest,
            ["combiner/weights.json", "combiner/weights.bin", "combiner/history.csv"],
        )
        print(
            f"[train-combiner] stopped at epoch {result.stopped_epoch} "
            f"(best {result.best_epoch}); members {report.selected}"
        )
        return True

    def _ensemble_model_and_inputs(self, images: np.ndarray):
        report = self.load_selection()
        members = self._load_candidate_models(report.selected)
        maps = member_probability_maps(members, images)
        include = self.config.ensemble.include_image_channel
        inputs = build_combiner_inputs(maps, images if include else None)
        cfg = combiner_model_config(self.config.model, len(report.selected), include)
        model = weights_to_module(load_weights(self.paths.combiner), cfg)
        return model, inputs

    def evaluate(self, model_name: str) -> bool:
        if model_name not in MODEL_NAMES:
            raise EvaluationError(f"unknown model '{model_name}'; expected one of {MODEL_NAMES}")
        digest = self._d_evaluate(model_name)
        stage = f"evaluate-{model_name}"
        if self._maybe_skip(stage, digest):
            return False
        if model_name == "baseline":
            _require(self.ledger, self.paths, "train-baseline", self._d_baseline())
        else:
            # prediction reloads members + selection, so check the whole chain
            _require(self.ledger, self.paths, "train-candidates", self._d_candidates())
            _require(self.ledger, self.paths, "select", self._d_select())
            _require(self.ledger, self.paths, "train-combiner", self._d_combiner())

        manifest = load_manifest(self.paths.data)
        test_x, test_y = load_split(self.paths.data, manifest, "test")
        roi = load_roi(self.paths.data)
        out_dir = self.paths.eval_dir(model_name)
        os.makedirs(out_dir, exist_ok=True)

        if model_name == "baseline":
            model = weights_to_module(load_weights(self.paths.baseline), self.config.model)
            inputs = test_x
        else:
            model, inputs = self._ensemble_model_and_inputs(test_x)

        outs = mc_predict(
            model,
            inputs,
            self.config.t_passes,
            seed=derive_seed(self.config.master_seed, "mc-eval", model_name),
        )
        bundle = self._write_metrics(
            outs, test_y, roi, manifest.splits["test"], out_dir, model_name
        )
        correct, incorrect = bundle["correct"], bundle["incorrect"]

        report = uqstats.divergence_report(
            correct,
            incorrect,
            self.config.divergence,
            gamma=self.config.gamma,
            b_replicates=self.config.b_replicates,
            ci_level=self.config.ci_level,
            seed=derive_seed(self.config.master_seed, "divergence", model_name),
        )
        mu_c, mu_i, dmu = uqstats.delta_mu(correct, incorrect)
        doc = report.to_dict() | {
            "model": model_name,
            "config_digest": self.config.digest(),
            "mu_correct": mu_c,
            "mu_incorrect": mu_i,
            "delta_mu": dmu,
        }
        with open(os.path.join(out_dir, "divergence.json"), "w", encoding="ascii") as f:
            json.dump(doc, f, sort_keys=True, indent=1)
            f.write("\n")
        with open(os.path.join(out_dir, "bootstrap_samples.csv"), "w", encoding="ascii") as f:
            f.write("estimate\n")
            for v in report.bootstrap_samples:
                f.write(f"{v:.8f}\n")

        self._write_kde(correct.values, incorrect.values, out_dir, model_name)
        self._render_maps(outs, manifest.splits["test"], out_dir)
        curve = bundle["curve"]
        svg_line_plot(
            os.path.join(out_dir, "pr_curve.svg"),
            [Series(label=model_name, x=curve.recall, y=curve.precision)],
            title=f"Precision-recall ({model_name})",
            xlabel="recall",
            ylabel="precision",
        )
        self._echo_config()
        rel = os.path.relpath(out_dir, self.paths.root)
        self.ledger.record(
            stage,
            digest,
            [
                f"{rel}/metrics.json",
                f"{rel}/divergence.json",
                f"{rel}/kde_correct.csv",
                f"{rel}/kde_incorrect.csv",
                f"{rel}/pr_curve.csv",
                f"{rel}/uncertainty_kde.svg",
                f"{rel}/pr_curve.svg",
            ],
        )
        print(
            f"[evaluate-{model_name}] R_alpha={report.estimate:.4f} "
            f"CI=[{report.ci_lo:.4f}, {report.ci_hi:.4f}] p={report.p_value:.6f} "
            f"(k={report.k}, alpha={report.alpha}, B={report.b_replicates}, gamma={report.gamma})"
        )
        return True

    def _write_kde(self, correct: np.ndarray, incorrect: np.ndarray, out_dir: str, model_name: str) -> None:
        seed_c = derive_seed(self.config.master_seed, "kde", model_name, "correct")
        seed_i = derive_seed(self.config.master_seed, "kde", model_name, "incorrect")
        sub_c = uqstats.subsample_pool(correct, _KDE_SAMPLE_CAP, seed_c)
        sub_i = uqstats.subsample_pool(incorrect, _KDE_SAMPLE_CAP, seed_i)
        lo = min(float(sub_c.min()), float(sub_i.min()))
        hi = max(float(sub_c.max()), float(sub_i.max()))
        grid = np.linspace(lo, hi, _KDE_GRID_POINTS)
        series = []
        for label, sub in (("correct", sub_c), ("incorrect", sub_i)):
            density = uqstats.kde(sub, grid)
            with open(os.path.join(out_dir, f"kde_{label}.csv"), "w", encoding="ascii") as f:
                f.write("x,density\n")
                for x, d in zip(grid, density):
                    f.write(f"{x:.8f},{d:.8f}\n")
            series.append(Series(label=label, x=grid, y=density))
        svg_line_plot(
            os.path.join(out_dir, "uncertainty_kde.svg"),
            series,
            title=f"Epistemic uncertainty by correctness ({model_name})",
            xlabel="epistemic uncertainty",
            ylabel="density",
        )

    def _render_maps(self, outs, ids, out_dir: str) -> None:
        maps_dir = os.path.join(out_dir, "maps")
        os.makedirs(maps_dir, exist_ok=True)
        for sid, out in list(zip(ids, outs))[:_N_MAP_RENDERS]:
            write_pfm(os.path.join(maps_dir, f"{sid}.prob.pfm"), out.prob_mean)
            write_pfm(os.path.join(maps_dir, f"{sid}.epistemic.pfm"), out.epistemic)
            peak = float(out.epistemic.max())
            render = out.epistemic / peak if peak > 0 else out.epistemic
            write_pgm(os.path.join(maps_dir, f"{sid}.epistemic.pgm"), render)

    # -- report ------------------------------------------------------------

    def report(self) -> None:
        if not os.path.exists(self.paths.ledger):
            raise ConfigError("out_dir", f"no run found under {self.paths.root}")
        rows = []
        for model_name in MODEL_NAMES:
            metrics_path = os.path.join(self.paths.eval_dir(model_name), "metrics.json")
            div_path = os.path.join(self.paths.eval_dir(model_name), "divergence.json")
            if os.path.exists(metrics_path) and os.path.exists(div_path):
                with open(metrics_path, encoding="ascii") as f:
                    metrics = json.load(f)
                with open(div_path, encoding="ascii") as f:
                    div = json.load(f)
                rows.append((model_name, metrics, div))
        if not rows:
            raise StageOrderError("report needs at least one completed 'evaluate' stage")

        os.makedirs(self.paths.report, exist_ok=True)
        md = [
            "# Run report",
            "",
            f"Config digest: `{self.config.digest()}`",
            "",
            f"Divergence settings: k={self.config.divergence.k}, "
            f"alpha={self.config.divergence.alpha}, B={self.config.b_replicates}, "
            f"gamma={self.config.gamma}, T={self.config.t_passes}",
            "",
            "## Uncertainty separation within ROI",
            "",
            "| model | mu_correct | mu_incorrect | delta_mu | R_alpha(corr||incorr) | 95% CI | p-value |",
            "|---|---|---|---|---|---|---|",
        ]
        for name, _, div in rows:
            md.append(
                f"| {name} | {div['mu_correct']:.6f} | {div['mu_incorrect']:.6f} | "
                f"{div['delta_mu']:.6f} | {div['estimate']:.6f} | "
                f"[{div['ci_lo']:.6f}, {div['ci_hi']:.6f}] | {div['p_value']:.6f} |"
            )
        md += [
            "",
            "## Segmentation performance within ROI",
            "",
            "| model | mean IoU | sensitivity | specificity | FPR | FNR | avg precision |",
            "|---|---|---|---|---|---|---|",
        ]
        for name, metrics, _ in rows:
            agg = metrics["aggregate"]
            md.append(
                f"| {name} | {agg['iou']:.6f} | {agg['sensitivity']:.6f} | "
                f"{agg['specificity']:.6f} | {agg['fpr']:.6f} | {agg['fnr']:.6f} | "
                f"{metrics['average_precision']:.6f} |"
            )
        if len(rows) == 2:
            (_, m0, d0), (_, m1, d1) = rows
            md += [
                "",
                "## Ensemble minus baseline",
                "",
                "| quantity | baseline | ensemble | delta |",
                "|---|---|---|---|",
            ]
            for label, a, b in (
                ("mean IoU", m0["aggregate"]["iou"], m1["aggregate"]["iou"]),
                ("sensitivity", m0["aggregate"]["sensitivity"], m1["aggregate"]["sensitivity"]),
                ("R_alpha", d0["estimate"], d1["estimate"]),
                ("delta_mu", d0["delta_mu"], d1["delta_mu"]),
            ):
                md.append(f"| {label} | {a:.6f} | {b:.6f} | {b - a:.6f} |")
        md.append("")
        with open(os.path.join(self.paths.report, "report.md"), "w", encoding="ascii") as f:
            f.write("\n".join(md))

        csv_lines = ["model,metric,value"]
        for name, metrics, div in rows:
            for key, value in sorted(metrics["aggregate"].items()):
                csv_lines.append(f"{name},{key},{value:.6f}")
            csv_lines.append(f"{name},average_precision,{metrics['average_precision']:.6f}")
            for key in ("mu_correct", "mu_incorrect", "delta_mu", "estimate", "ci_lo", "ci_hi", "p_value"):
                csv_lines.append(f"{name},{key},{div[key]:.6f}")
        with open(os.path.join(self.paths.report, "report.csv"), "w", encoding="ascii") as f:
            f.write("\n".join(csv_lines) + "\n")
        print(f"[report] wrote {self.paths.report}/report.md")
