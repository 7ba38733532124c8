import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

# Load .env from the application directory
load_dotenv(os.path.join(os.path.dirname(os.path.abspath(__file__)), ".env"))

import sequence_io
import validation
from config_loader import ExperimentConfig
from db.database import ResultDB, ResultRecord
from phylo.errors import (
    ConfigHashMismatch,
    EstimatorError,
    ReconstructionError,
    ReconstructionStall,
    ResultStoreError,
)
from phylo.indel_sim import RngStream, evolve_tree
from phylo.newick import model_tree_to_newick
from phylo.reconstruction import (
    ReconstructedTree,
    ReconstructionSettings,
    oracle_source,
    rf_distance,
    tree_reconstruct,
)
from phylo.run_logger import OutcomeInfo, RunEvent, RunLogger, TimingInfo, TrialInfo
from phylo.signatures import format_signature_dump
from phylo.tree_model import ModelTree, balanced, balanced_jitter, check_regime, default_asym_bound


TREE_STREAM = 1 << 62

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_STALL = 2

RESULTS_HEADER = ("sweep_key", "trial_id", "rf", "success", "levels", "cherries", "error")
SUMMARY_HEADER = ("sweep_key", "k", "trials", "successes", "success_rate", "rf_mean", "rf_max")
TIMINGS_HEADER = ("sweep_key", "trial_id", "wall_time_s")


def build_tree(config: ExperimentConfig) -> ModelTree:
    """Model tree from config.tree_file, or a generated balanced tree."""
    if config.tree_file:
        return sequence_io.load_model_tree(config.tree_file, config.lambda_min)
    params = config.edge_params()
    if config.tau_max > 1 or config.lambda_min > 0 or config.contemporaneous:
        gen = RngStream(config.seed, TREE_STREAM).generator()
        return balanced_jitter(
            config.depth, params, config.tau_max, gen,
            lambda_min=config.lambda_min or None,
            contemporaneous=config.contemporaneous,
        )
    return balanced(config.depth, params)


def reconstruction_settings(config: ExperimentConfig, lambda_min: float) -> ReconstructionSettings:
    return ReconstructionSettings(
        lambda_min=lambda_min,
        k=config.k,
        zeta=config.zeta,
        delta=config.delta,
        r=config.r,
        deep_h=config.deep_h,
        resolve_margin=config.resolve_margin,
        mode=config.mode,
        log_quartet_limit=config.log_quartet_limit,
    )


def sweep_key_for(config: ExperimentConfig, k: int) -> str:
    return f"k{k}" if len(config.k_list()) > 1 else ""


class ExperimentRunner:
    """Runs one subcommand for one configuration and owns its output directory."""

    def __init__(self, config: ExperimentConfig, out_dir: Optional[str] = None):
        self.config = config
        self.out_dir = out_dir or config.out_dir
        self.config_hash = config.config_hash
        self._tree: Optional[ModelTree] = None
        self.logger: Optional[RunLogger] = None

    # ---------- output directory ----------

    def path(self, name: str, sweep_key: str = "") -> str:
        return sequence_io.output_path(self.out_dir, name, sweep_key)

    def claim_out_dir(self):
        """Record the config in run.conf; an out dir holding another config is refused."""
        conf_path = self.path("run.conf")
        existing = sequence_io.read_stamp(conf_path)
        if existing and existing != self.config_hash:
            raise ConfigHashMismatch(
                f"{self.out_dir} holds outputs of config {existing}, current config is {self.config_hash}"
            )
        sequence_io.write_text(conf_path, f"# config_hash={self.config_hash}\n" + self.config.canonical_text())
        self.logger = RunLogger(self.out_dir, self.config_hash)

    def log(self, kind: str, success: bool = True, wall_time_s: float = 0.0, error: str = "", **metadata):
        if self.logger is None:
            return
        self.logger.log(RunEvent(
            kind=kind,
            trial=TrialInfo(seed=self.config.seed, mode=self.config.mode),
            timing=TimingInfo(phase=kind, wall_time_s=round(wall_time_s, 6)),
            outcome=OutcomeInfo(success=success, error=error),
            metadata=metadata,
        ))

    @property
    def tree(self) -> ModelTree:
        if self._tree is None:
            self._tree = build_tree(self.config)
        return self._tree

    def regime_report(self, tree: ModelTree) -> dict:
        bound = self.config.asym_bound or default_asym_bound(tree, self.config.beta)
        report = check_regime(tree, bound)
        if not report.ks_ok:
            print(f"[Regime] lambda_max={report.lambda_max:.6g} is above ln(sqrt(2)); expect degraded reconstruction")
        if self.config.mode == "asym" and not report.asym_bound_ok:
            print(f"[Regime] max |p_ins - p_del|={report.max_asymmetry:.6g} exceeds bound {bound:.6g}")
        return report.to_dict()

    # ---------- simulate ----------

    def cmd_simulate(self) -> int:
        self.claim_out_dir()
        cfg = self.config
        tree = self.tree
        regime = self.regime_report(tree)
        started = time.perf_counter()
        self.log("run_start", command="simulate", tree=tree.describe(), regime=regime)

        sequence_io.write_text(self.path("tree.nwk"), model_tree_to_newick(tree) + "\n")
        sequence_io.write_tree_params(self.path("tree_params.txt"), tree, self.config_hash)

        for trial in range(cfg.trials):
            trial_dir = f"trial_{trial:04d}" if cfg.trials > 1 else ""
            t0 = time.perf_counter()
            assign = evolve_tree(tree, cfg.k_root, RngStream(cfg.seed, trial), track_lineage=cfg.track_lineage)
            sequence_io.write_leaf_sequences(self.path("leaves.tsv", trial_dir), assign.leaf_sequences(), self.config_hash)
            if cfg.track_lineage:
                sequence_io.write_lineage(self.path("lineage.tsv", trial_dir), assign.leaf_lineage(), self.config_hash)
            lengths = [s.length for s in assign.leaf_sequences().values()]
            self.logger.log_trial(
                "simulate", trial, cfg.seed, True, time.perf_counter() - t0, mode=cfg.mode,
                metadata={"min_leaf_length": min(lengths), "max_leaf_length": max(lengths)},
            )

        print(f"[Simulate] {cfg.trials} trial(s), {tree.n_leaves} leaves, k_root={cfg.k_root} -> {self.out_dir}")
        self.log("run_end", wall_time_s=time.perf_counter() - started, command="simulate")
        return EXIT_OK

    # ---------- reconstruct ----------

    def _write_reconstruction(self, result: ReconstructedTree, dump: bool):
        sequence_io.write_text(self.path("reconstructed.nwk"), result.to_newick() + "\n")
        if dump:
            stamp = f"# config_hash={self.config_hash}\n"
            sequence_io.write_text(self.path("signatures.tsv"), stamp + format_signature_dump(result.signature_vectors))
            if result.distance_table is not None:
                sequence_io.write_text(self.path("distances.tsv"), stamp + result.distance_table.to_tsv())

    def _write_decision_log(self, lines: Sequence[str]):
        text = f"# config_hash={self.config_hash}\n" + "".join(line + "\n" for line in lines)
        sequence_io.write_text(self.path("decision.log"), text)

    def cmd_reconstruct(
        self,
        sequences_path: Optional[str] = None,
        oracle_tree: Optional[str] = None,
        truth_tree: Optional[str] = None,
        dump: bool = False,
    ) -> int:
        """Reconstruct from a leaf sequence file, or from exact distances of --oracle-tree."""
        self.claim_out_dir()
        started = time.perf_counter()
        truth: Optional[ModelTree] = None
        labels = None
        if oracle_tree:
            truth = sequence_io.load_model_tree(oracle_tree, self.config.lambda_min)
            data, labels = oracle_source(truth)
            lambda_min = truth.lambda_min
            source_name = f"oracle:{oracle_tree}"
        else:
            if not sequences_path:
                raise ValueError("reconstruct needs a sequence file or --oracle-tree")
            data = sequence_io.read_leaf_sequences(sequences_path)
            truth_path = truth_tree or self.config.tree_file
            if truth_path:
                truth = sequence_io.load_model_tree(truth_path, self.config.lambda_min)
            lambda_min = self._lambda_min(truth)
            source_name = sequences_path

        settings = reconstruction_settings(self.config, lambda_min)
        self.log("run_start", command="reconstruct", source=source_name)
        try:
            result = tree_reconstruct(data, settings, labels=labels)
        except ReconstructionStall as stall:
            self._write_decision_log(stall.decision_log)
            tail = stall.decision_log[-1] if stall.decision_log else f"h={stall.level} stall"
            print(f"[Reconstruct] stalled at level h={stall.level}: {tail}", file=sys.stderr)
            self.log("reconstruct", success=False, error=str(stall), wall_time_s=time.perf_counter() - started)
            return EXIT_STALL

        self._write_decision_log(result.decision_log)
        self._write_reconstruction(result, dump)
        summary = {"leaves": result.n_leaves, **result.stats}
        if truth is not None:
            expected = ReconstructedTree.from_model_tree(truth)
            summary["rf"] = rf_distance(result, expected)
            summary["lengths_exact"] = summary["rf"] == 0 and result.split_taus() == expected.split_taus()
        print(f"[Reconstruct] {result.to_newick()}")
        if "rf" in summary:
            print(f"[Reconstruct] rf={summary['rf']} lengths_exact={summary['lengths_exact']}")
        self.log("reconstruct", wall_time_s=time.perf_counter() - started, **summary)
        return EXIT_OK

    def _lambda_min(self, truth: Optional[ModelTree]) -> float:
        if self.config.lambda_min > 0:
            return self.config.lambda_min
        if truth is not None:
            return truth.lambda_min
        return self.tree.lambda_min

    # ---------- validate ----------

    def cmd_validate(
        self,
        lemmas: Sequence[str] = validation.LEMMAS,
        as_json: bool = False,
        run_self_test: bool = False,
        bounds: bool = False,
    ) -> int:
        self.claim_out_dir()
        cfg = self.config
        tree = self.tree
        self.regime_report(tree)
        started = time.perf_counter()
        self.log("run_start", command="validate", lemmas=list(lemmas))

        batch = validation.TrialBatch(cfg, tree, track_lineage=cfg.track_lineage or validation.BITSHIFTS in lemmas)
        reports = validation.run_checks(batch, lemmas)
        for report in reports:
            print(report.summary())
        sequence_io.write_tsv(self.path("validation.tsv"), validation.REPORT_HEADER,
                              (r.tsv_row() for r in reports), self.config_hash)

        flags = None
        if run_self_test:
            flags = validation.self_test(cfg)
            for name, passed in sorted(flags.items()):
                verdict = "ok (checker rejected it)" if not passed else "VACUOUS (checker accepted it)"
                print(f"[Validate] self-test {name}: {verdict}")

        if bounds:
            ks = cfg.k_list() if len(cfg.k_list()) > 1 else validation.default_gap_sweep(cfg)
            rows = validation.bounds_sweep(cfg, ks, tree)
            sequence_io.write_tsv(self.path("bounds.tsv"), validation.BOUNDS_HEADER, rows, self.config_hash)

        payload = validation.reports_to_json(reports, self.config_hash, flags)
        if as_json:
            sequence_io.write_text(self.path("validation.json"), payload)
            print(payload, end="")
        self.log("validate", wall_time_s=time.perf_counter() - started,
                 passed={r.lemma: r.passed for r in reports})
        return EXIT_OK

    # ---------- experiment ----------

    def _run_trial(self, tree: ModelTree, cfg: ExperimentConfig, trial: int, sweep_key: str) -> ResultRecord:
        t0 = time.perf_counter()
        truth = ReconstructedTree.from_model_tree(tree)
        settings = reconstruction_settings(cfg, tree.lambda_min)
        assign = evolve_tree(tree, cfg.k_root, RngStream(cfg.seed, trial))
        stats: Dict[str, object] = {}
        rf = None
        try:
            result = tree_reconstruct(assign.leaf_sequences(), settings)
            rf = rf_distance(result, truth)
            stats.update(levels=result.stats.get("levels_total"), cherries=result.stats.get("cherries"))
        except ReconstructionStall as stall:
            stats.update(error="stall", stalled_level=stall.level)
        except (ReconstructionError, EstimatorError) as exc:
            stats.update(error=type(exc).__name__)
        return ResultRecord(
            trial_id=trial,
            rf=rf,
            success=rf == 0,
            wall_time=time.perf_counter() - t0,
            stats=stats,
            sweep_key=sweep_key,
        )

    def cmd_experiment(self) -> int:
        """Simulate and reconstruct every trial of every sweep point; completed trials are skipped."""
        self.claim_out_dir()
        cfg = self.config
        tree = self.tree
        regime = self.regime_report(tree)
        db = ResultDB(self.path("results.db"))
        db.register_run(self.config_hash, cfg.canonical_text())
        started = time.perf_counter()
        self.log("run_start", command="experiment", tree=tree.describe(), regime=regime)

        for k in cfg.k_list():
            point = cfg.with_k(k)
            sweep_key = sweep_key_for(cfg, k)
            done = db.completed_trials(self.config_hash, sweep_key)
            todo = [t for t in range(cfg.trials) if t not in done]
            if done:
                print(f"[Experiment] {sweep_key or 'run'}: resuming, {len(done)} trial(s) already stored")
            workers = min(validation.worker_count(), max(len(todo), 1))
            stored = 0
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(self._run_trial, tree, point, t, sweep_key) for t in todo]
                try:
                    for future in as_completed(futures):
                        self._store_trial(db, future.result())
                        stored += 1
                except BaseException:
                    for future in futures:
                        future.cancel()
                    raise
            print(f"[Experiment] {sweep_key or 'run'}: {stored} new trial(s)")

        self._write_experiment_tables(db)
        self.log("run_end", wall_time_s=time.perf_counter() - started, command="experiment")
        return EXIT_OK

    def _store_trial(self, db: ResultDB, record: ResultRecord):
        if not db.append(self.config_hash, record):
            raise ResultStoreError(f"trial {record.trial_id} ({record.sweep_key or 'run'}) was already stored")
        self.logger.log_trial(
            "trial", record.trial_id, self.config.seed, record.success, record.wall_time,
            rf=record.rf, error=str(record.stats.get("error", "")),
            stalled_level=record.stats.get("stalled_level"),
            sweep_key=record.sweep_key, mode=self.config.mode,
        )

    def _write_experiment_tables(self, db: ResultDB):
        cfg = self.config
        results_rows: List[list] = []
        summary_rows: List[list] = []
        timing_rows: List[list] = []
        for k in cfg.k_list():
            sweep_key = sweep_key_for(cfg, k)
            records = db.results(self.config_hash, sweep_key)
            for r in records:
                results_rows.append([sweep_key, r.trial_id, r.rf, r.success,
                                     r.stats.get("levels"), r.stats.get("cherries"), r.stats.get("error", "")])
                timing_rows.append([sweep_key, r.trial_id, round(r.wall_time, 6)])
            rfs = [r.rf for r in records if r.rf is not None]
            successes = sum(1 for r in records if r.success)
            summary_rows.append([
                sweep_key, k, len(records), successes,
                successes / len(records) if records else 0.0,
                sum(rfs) / len(rfs) if rfs else None,
                max(rfs) if rfs else None,
            ])
            print(f"[Experiment] k={k}: success {successes}/{len(records)}")
        sequence_io.write_tsv(self.path("results.tsv"), RESULTS_HEADER, results_rows, self.config_hash)
        sequence_io.write_tsv(self.path("experiment.tsv"), SUMMARY_HEADER, summary_rows, self.config_hash)
        sequence_io.write_tsv(self.path("timings.tsv"), TIMINGS_HEADER, timing_rows, self.config_hash)

    # ---------- rf ----------

    def cmd_rf(self, first: str, second: str) -> int:
        lam = self.config.lambda_min or None
        t1 = ReconstructedTree.from_newick(sequence_io.read_text(first), lam, source=first)
        t2 = ReconstructedTree.from_newick(sequence_io.read_text(second), lam, source=second)
        print(rf_distance(t1, t2))
        return EXIT_OK
