"""
Monte Carlo validators.

Each checker simulates (or is handed) a batch of trials over one model tree and
turns a concentration property of the CFN-Indel process into a LemmaReport:
an observed statistic, the bound it is held against and a pass flag decided
by a fixed rule. All logs are base 2; bounds are multiplied by config.slack.

The per-trial regularity event (lengths, bit shifts when lineage is tracked,
block balance) is recorded alongside every estimator statistic so reports can
show the statistic both unconditioned and restricted to regular trials.
"""

import json
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config_loader import ExperimentConfig
from phylo.errors import EstimatorError, InsufficientLengthError, LineageMissingError
from phylo.estimators import KnownDistances, deep_distance, reconstruct_signature, shallow_correlation
from phylo.indel_sim import Bitstring, RngStream, SequenceAssignment, evolve_tree, normalized_shift_max
from phylo.signatures import (
    SignatureVector,
    block_scheme,
    node_block_length,
    pseudo_signature_vector,
    root_block_length,
    scaled_signature_vector,
    signature_vector,
)
from phylo.tree_model import EdgeParams, ModelTree, balanced, eta, path_distance, scaled_params


LENGTHS = "lengths"
BITSHIFTS = "bitshifts"
BLOCK_BALANCE = "block_balance"
UNBIASEDNESS = "unbiasedness"
SIGNATURE_VARIANCE = "signature_variance"
DEEP_DISTANCE = "deep_distance"
PSEUDO_BLOCK_GAP = "pseudo_block_gap"
LEMMAS = (LENGTHS, BITSHIFTS, BLOCK_BALANCE, UNBIASEDNESS, SIGNATURE_VARIANCE, DEEP_DISTANCE, PSEUDO_BLOCK_GAP)

REQUIRED_PASS_RATE = 0.99
VARIANCE_SPREAD = 4.0
GROWTH_RATIO = 1.2
TREND_TOLERANCE = 1e-12


def worker_count() -> int:
    """INDELPHY_THREADS, or the CPU count when unset."""
    raw = os.environ.get("INDELPHY_THREADS", "").strip()
    try:
        count = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        count = os.cpu_count() or 1
    return max(1, count)


def log2n(n: int) -> float:
    return math.log2(max(n, 2))


def exact_known_distances(tree: ModelTree) -> KnownDistances:
    """d(a, x) for every node x and each of its ancestors a."""
    known = KnownDistances()
    rooted = [tree.root_distance(v) for v in range(tree.n_nodes)]
    for x in range(1, tree.n_nodes):
        for a in tree.ancestors(x)[1:]:
            known.set(a, x, rooted[x] - rooted[a])
    return known


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _finite_or_none(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _quantiles(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray([v for v in values if v is not None and math.isfinite(v)], dtype=float)
    if arr.size == 0:
        return {}
    return {
        "min": float(arr.min()),
        "mean": float(arr.mean()),
        "q50": float(np.quantile(arr, 0.5)),
        "q90": float(np.quantile(arr, 0.9)),
        "max": float(arr.max()),
    }


@dataclass
class LemmaReport:
    lemma: str
    statistic: float
    bound: float
    passed: bool
    sample_size: int
    pass_rate: Optional[float] = None
    conditioned: Optional[float] = None
    quantiles: Dict[str, float] = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lemma": self.lemma,
            "statistic": _finite_or_none(self.statistic),
            "bound": _finite_or_none(self.bound),
            "pass": self.passed,
            "sample_size": self.sample_size,
            "pass_rate": self.pass_rate,
            "conditioned": _finite_or_none(self.conditioned),
            "quantiles": self.quantiles,
            "details": self.details,
        }

    def tsv_row(self) -> List[object]:
        return [self.lemma, self.statistic, self.bound, self.passed, self.sample_size, self.pass_rate, self.conditioned]

    def summary(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        extra = f" rate={self.pass_rate:.3f}" if self.pass_rate is not None else ""
        return (
            f"[Validate] {self.lemma}: {verdict} statistic={self.statistic:.6g} "
            f"bound={self.bound:.6g} n={self.sample_size}{extra}"
        )


REPORT_HEADER = ("lemma", "statistic", "bound", "pass", "sample_size", "pass_rate", "conditioned")


def reports_to_json(reports: Sequence[LemmaReport], config_hash: str, self_test: Optional[Dict[str, bool]] = None) -> str:
    payload = {
        "config_hash": config_hash,
        "reports": [r.to_dict() for r in reports],
    }
    if self_test is not None:
        payload["self_test"] = dict(sorted(self_test.items()))
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialRegularity:
    trial: int
    length_dev: float
    lengths_ok: bool
    block_max: float
    blocks_ok: bool
    shift_max: Optional[float] = None
    shifts_ok: Optional[bool] = None

    @property
    def regular(self) -> bool:
        return self.lengths_ok and self.blocks_ok and self.shifts_ok is not False


def _window_stat(bits: np.ndarray) -> float:
    """max over dyadic window lengths m and all offsets of |zeros - m/2| / sqrt(m)."""
    size = bits.size
    if size == 0:
        return 0.0
    zeros = np.concatenate(([0], np.cumsum(1 - bits.astype(np.int64))))
    worst = 0.0
    m = 1
    while m <= size:
        counts = zeros[m:] - zeros[:-m]
        worst = max(worst, float(np.max(np.abs(counts - m / 2.0))) / math.sqrt(m))
        m *= 2
    return worst


class TrialBatch:
    """Trials of one experiment over one tree.

    Assignments are re-simulated on demand from (seed, trial), so a batch holds
    no sequences unless they were injected.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        tree: Optional[ModelTree] = None,
        assignments: Optional[Sequence[SequenceAssignment]] = None,
        track_lineage: Optional[bool] = None,
    ):
        if tree is None and not assignments:
            raise ValueError("a batch needs a tree or injected assignments")
        self.config = config
        self.tree = tree if tree is not None else assignments[0].tree
        self._injected = list(assignments) if assignments is not None else None
        if self._injected is not None:
            self.trials = len(self._injected)
            self.track_lineage = all(a.has_lineage for a in self._injected)
        else:
            self.trials = config.trials
            self.track_lineage = config.track_lineage if track_lineage is None else track_lineage
        if self.trials < 1:
            raise ValueError("a batch needs at least one trial")
        self.seed = config.seed
        self.scheme = block_scheme(config.k, config.zeta)
        self.log_n = log2n(self.tree.n_leaves)
        self._etas = np.array([eta(self.tree, v) for v in range(self.tree.n_nodes)])
        self._depths = np.array([self.tree.depth(v) for v in range(self.tree.n_nodes)])
        self._known: Optional[KnownDistances] = None
        self._shift_pairs: Optional[List[Tuple[int, int]]] = None
        self._regularity: Dict[int, TrialRegularity] = {}
        self._lock = threading.Lock()

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def k_root(self) -> int:
        return self.config.k_root

    @property
    def injected(self) -> bool:
        return self._injected is not None

    def with_k(self, k: int) -> "TrialBatch":
        return TrialBatch(self.config.with_k(k), self.tree, track_lineage=self.track_lineage)

    def assignment(self, trial: int) -> SequenceAssignment:
        if self._injected is not None:
            return self._injected[trial]
        return evolve_tree(self.tree, self.k_root, RngStream(self.seed, trial), track_lineage=self.track_lineage)

    def map(self, fn: Callable[[int, SequenceAssignment], object]) -> list:
        """fn(trial, assignment) for every trial; results in trial order."""
        ids = list(range(self.trials))

        def run(trial: int):
            return fn(trial, self.assignment(trial))

        workers = min(worker_count(), len(ids))
        if workers <= 1:
            return [run(t) for t in ids]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, ids))

    def known_distances(self) -> KnownDistances:
        if self._known is None:
            self._known = exact_known_distances(self.tree)
        return self._known

    def vector(self, assign: SequenceAssignment, node: int) -> Optional[SignatureVector]:
        """True-block signature (sym) or pseudo-block signature (asym); None when too short."""
        bits = assign.bits(node)
        try:
            if self.mode == "asym":
                return pseudo_signature_vector(bits, self.scheme.L, node)
            return signature_vector(bits, self.scheme, node)
        except InsufficientLengthError:
            return None

    def leaf_vectors(self, assign: SequenceAssignment) -> Dict[int, SignatureVector]:
        vectors = {}
        for v in self.tree.leaves:
            vec = self.vector(assign, v)
            if vec is not None:
                vectors[v] = vec
        return vectors

    # ---------- regularity ----------

    def shift_pairs(self) -> List[Tuple[int, int]]:
        """Every (root, node) pair plus the most distant leaf pairs."""
        if self._shift_pairs is None:
            tree = self.tree
            leaves = list(tree.leaves)
            leaf_pairs = sorted(
                ((-path_distance(tree, a, b), a, b) for i, a in enumerate(leaves) for b in leaves[i + 1:]),
            )
            pairs = [(tree.root, v) for v in range(1, tree.n_nodes)]
            pairs.extend((a, b) for _, a, b in leaf_pairs[: self.config.pairs_per_trial])
            self._shift_pairs = pairs
        return self._shift_pairs

    def length_envelope(self, root_length: int) -> np.ndarray:
        """Per-node bound on |k_a / eta(a) / k_r - 1|."""
        slack = self.config.slack
        return slack * 2.0 * self._depths * self.log_n / np.sqrt(max(root_length, 1) * self._etas)

    def shift_bound(self, root_length: int) -> float:
        k_ref = root_length / 2.0 if self.mode == "sym" else float(root_length)
        return self.config.slack * 4.0 * self.log_n ** 2 * math.sqrt(k_ref)

    def block_bound(self) -> float:
        return self.config.slack * self.log_n

    def _length_check(self, assign: SequenceAssignment) -> Tuple[float, bool]:
        lengths = assign.lengths().astype(float)
        k_r = max(assign.root_length, 1)
        dev_all = np.abs(lengths / self._etas / k_r - 1.0)
        if self.mode == "sym":
            k = assign.root_length / 2.0
            slack = self.config.slack
            ok = bool(np.all((lengths >= k / slack) & (lengths <= 4.0 * k * slack)))
        else:
            ok = bool(np.all(dev_all <= self.length_envelope(assign.root_length) + TREND_TOLERANCE))
        return float(dev_all.max()), ok

    def regularity(self, trial: int, assign: SequenceAssignment) -> TrialRegularity:
        with self._lock:
            cached = self._regularity.get(trial)
        if cached is not None:
            return cached

        length_dev, lengths_ok = self._length_check(assign)
        block_max = max(_window_stat(assign.bits(v).bits) for v in range(self.tree.n_nodes))
        shift_max = shifts_ok = None
        if assign.has_lineage:
            shift_max = max((normalized_shift_max(assign, a, b) for a, b in self.shift_pairs()), default=0.0)
            shifts_ok = shift_max <= self.shift_bound(assign.root_length)
        result = TrialRegularity(
            trial=trial,
            length_dev=length_dev,
            lengths_ok=lengths_ok,
            block_max=block_max,
            blocks_ok=block_max <= self.block_bound(),
            shift_max=shift_max,
            shifts_ok=shifts_ok,
        )
        with self._lock:
            self._regularity[trial] = result
        return result

    def regularity_all(self) -> List[TrialRegularity]:
        return self.map(self.regularity)


# ---------------------------------------------------------------------------
# Regularity checkers
# ---------------------------------------------------------------------------

def _rate(flags: Sequence[bool]) -> float:
    return float(np.mean(flags)) if len(flags) else 0.0


def check_lengths(batch: TrialBatch) -> LemmaReport:
    regs = batch.regularity_all()
    rate = _rate([r.lengths_ok for r in regs])
    devs = [r.length_dev for r in regs]
    details = {"mode": batch.mode}
    if batch.mode == "sym":
        statistic, bound = rate, REQUIRED_PASS_RATE
    else:
        statistic = max(devs)
        bound = float(batch.length_envelope(batch.k_root).max())
    return LemmaReport(
        lemma=LENGTHS,
        statistic=statistic,
        bound=bound,
        passed=rate >= REQUIRED_PASS_RATE,
        sample_size=len(regs),
        pass_rate=rate,
        quantiles=_quantiles(devs),
        details=details,
    )


def check_bitshifts(batch: TrialBatch) -> LemmaReport:
    if not batch.track_lineage:
        raise LineageMissingError("bit-shift validation needs lineage tracking")
    regs = batch.regularity_all()
    shifts = [r.shift_max for r in regs]
    rate = _rate([bool(r.shifts_ok) for r in regs])
    return LemmaReport(
        lemma=BITSHIFTS,
        statistic=max(shifts),
        bound=batch.shift_bound(batch.assignment(0).root_length if batch.injected else batch.k_root),
        passed=rate >= REQUIRED_PASS_RATE,
        sample_size=len(regs),
        pass_rate=rate,
        quantiles=_quantiles(shifts),
        details={"pairs_per_trial": len(batch.shift_pairs())},
    )


def check_block_balance(batch: TrialBatch) -> LemmaReport:
    regs = batch.regularity_all()
    stats = [r.block_max for r in regs]
    rate = _rate([r.blocks_ok for r in regs])
    return LemmaReport(
        lemma=BLOCK_BALANCE,
        statistic=max(stats),
        bound=batch.block_bound(),
        passed=rate >= REQUIRED_PASS_RATE,
        sample_size=len(regs),
        pass_rate=rate,
        quantiles=_quantiles(stats),
    )


# ---------------------------------------------------------------------------
# Estimator checkers
# ---------------------------------------------------------------------------

def default_unbias_pairs(tree: ModelTree, limit: int, max_distance: float = 1.0) -> List[Tuple[int, int]]:
    """Closest leaf pairs with d <= max_distance (the closest pairs when none qualify)."""
    leaves = list(tree.leaves)
    ranked = sorted(
        (path_distance(tree, a, b), a, b) for i, a in enumerate(leaves) for b in leaves[i + 1:]
    )
    within = [(a, b) for d, a, b in ranked if d <= max_distance]
    chosen = within if within else [(a, b) for _, a, b in ranked]
    return chosen[:limit]


def _pair_means(samples: List[List[Optional[float]]], keep: Sequence[bool]) -> List[Tuple[float, float, int]]:
    """(mean, standard error, count) per pair column over the kept trials."""
    out = []
    columns = list(zip(*samples)) if samples else []
    for column in columns:
        values = np.array([v for v, k in zip(column, keep) if k and v is not None and math.isfinite(v)], dtype=float)
        if values.size == 0:
            out.append((math.nan, math.inf, 0))
            continue
        se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else math.inf
        out.append((float(values.mean()), se, int(values.size)))
    return out


def check_unbiasedness(batch: TrialBatch, pairs: Optional[Sequence[Tuple[int, int]]] = None) -> LemmaReport:
    """Mean of 4 * C~(a, b) * e^{d(a, b)} per pair should sit at 1."""
    tree = batch.tree
    pairs = list(pairs) if pairs is not None else default_unbias_pairs(tree, batch.config.pairs_per_trial)
    if not pairs:
        raise EstimatorError("no node pairs to validate")
    dists = [path_distance(tree, a, b) for a, b in pairs]
    tol = batch.config.unbias_tolerance * batch.config.slack

    def per_trial(trial: int, assign: SequenceAssignment):
        cache: Dict[int, Optional[SignatureVector]] = {}

        def vec(v: int):
            if v not in cache:
                cache[v] = batch.vector(assign, v)
            return cache[v]

        row = []
        for (a, b), d in zip(pairs, dists):
            sa, sb = vec(a), vec(b)
            row.append(None if sa is None or sb is None else 4.0 * shallow_correlation(sa, sb).value * math.exp(d))
        return row, batch.regularity(trial, assign).regular

    results = batch.map(per_trial)
    samples = [row for row, _ in results]
    regular = [reg for _, reg in results]
    stats = _pair_means(samples, [True] * len(samples))
    cond = _pair_means(samples, regular)

    def worst(rows):
        gaps = [abs(m - 1.0) for m, _, n in rows if n > 0]
        return max(gaps) if gaps else math.inf

    ok = all(n > 0 and abs(m - 1.0) <= tol + 2.0 * se for m, se, n in stats)
    return LemmaReport(
        lemma=UNBIASEDNESS,
        statistic=worst(stats),
        bound=tol,
        passed=ok,
        sample_size=len(samples),
        conditioned=worst(cond) if any(regular) else None,
        quantiles=_quantiles([m for m, _, n in stats if n > 0]),
        details={
            "pairs": [
                {"pair": [a, b], "d": d, "mean": _finite_or_none(m), "se": _finite_or_none(se), "n": n}
                for (a, b), d, (m, se, n) in zip(pairs, dists, stats)
            ],
        },
    )


def control_tree(tree: ModelTree, config: ExperimentConfig) -> ModelTree:
    """Balanced tree of the same depth whose edges all sit at config.control_lambda."""
    base = EdgeParams(p_sub=0.0, p_del=config.p_del, p_ins=config.p_ins)
    params = scaled_params(base, 1, config.control_lambda)
    return balanced(max(tree.depth_max, 1), params, lambda_min=config.control_lambda)


def _height_series(batch: TrialBatch, heights: Sequence[int]) -> Tuple[Dict[int, float], Dict[int, float], int]:
    """E[s_hat^2] per height, unconditioned and over regular trials."""
    levels = batch.tree.levels()
    known = batch.known_distances()
    usable = [h for h in heights if h < len(levels)]

    def per_trial(trial: int, assign: SequenceAssignment):
        leaf_vecs = batch.leaf_vectors(assign)
        sums = {}
        for h in usable:
            total, count = 0.0, 0
            for a in levels[h]:
                under = batch.tree.leaves_under(a)
                if any(x not in leaf_vecs for x in under):
                    continue
                if h == 0:
                    values = leaf_vecs[a].values
                else:
                    values = reconstruct_signature(leaf_vecs, under, known, a).values
                total += float(np.sum(values ** 2))
                count += values.size
            sums[h] = (total, count)
        return sums, batch.regularity(trial, assign).regular

    results = batch.map(per_trial)

    def collect(keep):
        series = {}
        for h in usable:
            total = sum(r[0][h][0] for r, k in zip(results, keep) if k)
            count = sum(r[0][h][1] for r, k in zip(results, keep) if k)
            if count:
                series[h] = total / count
        return series

    regular = [reg for _, reg in results]
    return collect([True] * len(results)), collect(regular), len(results)


def _spread(series: Mapping[int, float]) -> float:
    values = [v for v in series.values() if v > 0]
    if len(values) < 2:
        return math.inf
    return max(values) / min(values)


def _mean_growth(series: Mapping[int, float]) -> float:
    hs = sorted(series)
    ratios = [series[b] / series[a] for a, b in zip(hs, hs[1:]) if series[a] > 0]
    return float(np.mean(ratios)) if ratios else 0.0


def check_signature_variance(
    batch: TrialBatch,
    heights: Optional[Sequence[int]] = None,
    control: Optional[TrialBatch] = None,
) -> LemmaReport:
    """E[s_hat^2] stays bounded across heights below the threshold and grows above it."""
    heights = sorted(set(heights if heights is not None else batch.config.height_list()))
    series, conditioned, trials = _height_series(batch, heights)
    if len(series) < 2:
        raise EstimatorError(f"need at least two usable heights, tree depth is {batch.tree.depth_max}")
    if control is None:
        control = TrialBatch(batch.config, control_tree(batch.tree, batch.config), track_lineage=False)
    control_series, _, _ = _height_series(control, heights)

    spread = _spread(series)
    growth = _mean_growth(control_series)
    bound = VARIANCE_SPREAD * batch.config.slack
    return LemmaReport(
        lemma=SIGNATURE_VARIANCE,
        statistic=spread,
        bound=bound,
        passed=spread <= bound and growth >= GROWTH_RATIO,
        sample_size=trials,
        conditioned=_spread(conditioned) if len(conditioned) >= 2 else None,
        quantiles=_quantiles(list(series.values())),
        details={
            "series": {str(h): v for h, v in sorted(series.items())},
            "control_series": {str(h): v for h, v in sorted(control_series.items())},
            "control_lambda": control.tree.edge_lambda(1),
            "control_growth": growth,
            "growth_required": GROWTH_RATIO,
        },
    )


def default_deep_pairs(tree: ModelTree, height: int, limit: int) -> List[Tuple[int, int]]:
    levels = tree.levels()
    if height >= len(levels) or len(levels[height]) < 2:
        raise EstimatorError(f"tree of depth {tree.depth_max} has no node pairs at height {height}")
    nodes = levels[height]
    ranked = sorted(
        (path_distance(tree, a, b), a, b) for i, a in enumerate(nodes) for b in nodes[i + 1:]
    )
    return [(a, b) for _, a, b in ranked[:limit]]


def check_deep_distance(batch: TrialBatch, pairs: Optional[Sequence[Tuple[int, int]]] = None) -> LemmaReport:
    """P(|d_hat - d| < epsilon) per pair, with exact distances below the pair."""
    tree = batch.tree
    h_off = batch.config.deep_h
    pairs = list(pairs) if pairs is not None else default_deep_pairs(tree, h_off, batch.config.pairs_per_trial)
    if not pairs:
        raise EstimatorError("no node pairs to validate")
    eps = batch.config.effective_epsilon(tree.lambda_min)
    dists = [path_distance(tree, a, b) for a, b in pairs]
    known = batch.known_distances()

    def per_trial(trial: int, assign: SequenceAssignment):
        leaf_vecs = batch.leaf_vectors(assign)
        cache: Dict[int, SignatureVector] = {}
        row = []
        for pair, d in zip(pairs, dists):
            try:
                est = deep_distance(pair, h_off, leaf_vecs, known, tree, cache=cache)
                row.append(abs(est.value - d) < eps)
            except EstimatorError:
                row.append(False)
        return row, batch.regularity(trial, assign).regular

    results = batch.map(per_trial)
    hits = np.array([row for row, _ in results], dtype=float)
    regular = np.array([reg for _, reg in results], dtype=bool)
    rates = hits.mean(axis=0)
    cond_rates = hits[regular].mean(axis=0) if regular.any() else None
    threshold = batch.config.deep_success
    return LemmaReport(
        lemma=DEEP_DISTANCE,
        statistic=float(rates.min()),
        bound=threshold,
        passed=bool(rates.min() >= threshold),
        sample_size=len(results),
        pass_rate=float(rates.mean()),
        conditioned=float(cond_rates.min()) if cond_rates is not None else None,
        quantiles=_quantiles(rates.tolist()),
        details={
            "epsilon": eps,
            "height_offset": h_off,
            "pairs": [{"pair": [a, b], "d": d, "rate": float(r)} for (a, b), d, r in zip(pairs, dists, rates)],
        },
    )


def default_gap_sweep(config: ExperimentConfig) -> List[int]:
    ks = sorted(set(config.k_list()))
    if len(ks) >= 2:
        return ks
    return [max(16, config.k // 4), config.k]


def _trial_gap(batch: TrialBatch, assign: SequenceAssignment) -> float:
    """max |s~ - s| over leaves and blocks, s on per-node blocks of length floor(l_r * eta)."""
    L = batch.scheme.L
    l_root = root_block_length(assign.root_length, L)
    worst = 0.0
    for v in batch.tree.leaves:
        bits = assign.bits(v)
        try:
            true = scaled_signature_vector(bits, node_block_length(l_root, batch._etas[v]), L, v)
            pseudo = pseudo_signature_vector(bits, L, v)
        except InsufficientLengthError:
            continue
        worst = max(worst, float(np.max(np.abs(pseudo.values - true.values))))
    return worst


def check_pseudo_block_gap(
    batch: TrialBatch,
    ks: Optional[Sequence[int]] = None,
    batches: Optional[Mapping[int, TrialBatch]] = None,
) -> LemmaReport:
    """Median per-trial max |s~ - s| should not grow along the k sweep."""
    if batches is not None:
        ks = sorted(batches)
    else:
        ks = sorted(set(ks)) if ks else default_gap_sweep(batch.config)
    medians, cond_medians, samples = [], [], 0
    for k in ks:
        if batches is not None:
            b = batches[k]
        else:
            b = batch if k == batch.config.k else batch.with_k(k)
        results = b.map(lambda t, a, b=b: (_trial_gap(b, a), b.regularity(t, a).regular))
        gaps = [g for g, _ in results]
        kept = [g for g, reg in results if reg]
        medians.append(float(np.median(gaps)))
        cond_medians.append(float(np.median(kept)) if kept else None)
        samples += len(results)

    slack = batch.config.slack
    trend_ok = all(later <= earlier * slack + TREND_TOLERANCE for earlier, later in zip(medians, medians[1:]))
    return LemmaReport(
        lemma=PSEUDO_BLOCK_GAP,
        statistic=medians[-1],
        bound=medians[0],
        passed=trend_ok,
        sample_size=samples,
        conditioned=cond_medians[-1],
        quantiles=_quantiles(medians),
        details={"k": list(ks), "median_gap": medians, "conditioned_median_gap": cond_medians},
    )


CHECKERS: Dict[str, Callable[[TrialBatch], LemmaReport]] = {
    LENGTHS: check_lengths,
    BITSHIFTS: check_bitshifts,
    BLOCK_BALANCE: check_block_balance,
    UNBIASEDNESS: check_unbiasedness,
    SIGNATURE_VARIANCE: check_signature_variance,
    DEEP_DISTANCE: check_deep_distance,
    PSEUDO_BLOCK_GAP: check_pseudo_block_gap,
}


def run_checks(batch: TrialBatch, lemmas: Sequence[str] = LEMMAS) -> List[LemmaReport]:
    unknown = [name for name in lemmas if name not in CHECKERS]
    if unknown:
        raise ValueError(f"unknown lemma(s): {', '.join(unknown)}")
    return [CHECKERS[name](batch) for name in lemmas]


# ---------------------------------------------------------------------------
# Sweeps and self-test
# ---------------------------------------------------------------------------

BOUNDS_HEADER = ("lemma", "n", "k", "observed", "bound")


def bounds_sweep(config: ExperimentConfig, ks: Sequence[int], tree: ModelTree) -> List[Tuple[str, int, int, float, float]]:
    """Observed regularity statistics next to their functional bounds (slack 1) for each k."""
    rows = []
    n = tree.n_leaves
    raw = replace(config, slack=1.0)
    for k in ks:
        batch = TrialBatch(raw.with_k(k), tree, track_lineage=True)
        regs = batch.regularity_all()
        k_root = batch.k_root
        rows.append((LENGTHS, n, k, max(r.length_dev for r in regs), float(batch.length_envelope(k_root).max())))
        rows.append((BITSHIFTS, n, k, max(r.shift_max for r in regs), batch.shift_bound(k_root)))
        rows.append((BLOCK_BALANCE, n, k, max(r.block_max for r in regs), batch.block_bound()))
    return rows


_SELF_TEST_K = 1024


def _injected(tree: ModelTree, config: ExperimentConfig, make: Callable[[int, int], Bitstring], trials: int,
              lineage: Optional[Callable[[int], np.ndarray]] = None, root_length: Optional[int] = None) -> TrialBatch:
    """Batch whose node v in trial t holds make(t, v)."""
    assignments = []
    for t in range(trials):
        seqs = tuple(make(t, v) for v in range(tree.n_nodes))
        lin = tuple(lineage(v) for v in range(tree.n_nodes)) if lineage else None
        assignments.append(SequenceAssignment(
            tree=tree,
            sequences=seqs,
            root_length=root_length if root_length is not None else seqs[0].length,
            lineage=lin,
        ))
    return TrialBatch(config, tree, assignments=assignments)


def self_test(config: ExperimentConfig) -> Dict[str, bool]:
    """Run every checker on an input built to violate it; each flag must come back False."""
    cfg = replace(
        config, mode="sym", k=_SELF_TEST_K, k_sweep="", slack=1.0, heights="1,2,3,4,5",
        deep_h=2, pairs_per_trial=16, trials=1,
    )
    k_root = cfg.k_root
    params = EdgeParams(p_sub=0.1, p_del=0.0, p_ins=0.0)
    small = balanced(2, params)
    mid = balanced(3, params)
    deep = balanced(5, params)
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(1 << 62,))))
    noise = {}

    def random_bits(t: int, v: int) -> Bitstring:
        if (t, v) not in noise:
            noise[(t, v)] = Bitstring.from_array(gen.integers(0, 2, size=k_root, dtype=np.uint8))
        return noise[(t, v)]

    results: Dict[str, bool] = {}

    # leaves emptied out
    batch = _injected(small, cfg, lambda t, v: random_bits(t, 0) if v == 0 else Bitstring.zeros(0), 3,
                      root_length=k_root)
    results[LENGTHS] = check_lengths(batch).passed

    # every non-root lineage rotated by half the string
    ids = np.arange(1, k_root + 1, dtype=np.int64)
    batch = _injected(small, cfg, lambda t, v: Bitstring.zeros(k_root), 3,
                      lineage=lambda v: ids if v == 0 else np.roll(ids, k_root // 2))
    results[BITSHIFTS] = check_bitshifts(batch).passed

    batch = _injected(small, cfg, lambda t, v: Bitstring.zeros(k_root), 3)
    results[BLOCK_BALANCE] = check_block_balance(batch).passed

    # one leaf is the complement of all the others
    last = small.leaves[-1]

    def complemented(t: int, v: int) -> Bitstring:
        bits = random_bits(t, 0).bits
        return Bitstring.from_array(1 - bits) if v == last else Bitstring.from_array(bits)

    batch = _injected(small, cfg, complemented, 30)
    results[UNBIASEDNESS] = check_unbiasedness(batch).passed

    # independent leaves: s_hat shrinks with height instead of staying level, and so does the control
    batch = _injected(deep, cfg, random_bits, 50)
    results[SIGNATURE_VARIANCE] = check_signature_variance(batch, control=batch).passed

    batch = _injected(mid, cfg, lambda t, v: Bitstring.zeros(k_root), 3)
    results[DEEP_DISTANCE] = check_deep_distance(batch).passed

    # gap zero at the small k, positive at the large one
    small_k, large_k = _SELF_TEST_K // 4, _SELF_TEST_K
    cfg_small, cfg_large = cfg.with_k(small_k), cfg.with_k(large_k)
    exact = _injected(small, cfg_small, lambda t, v: Bitstring.zeros(cfg_small.k_root), 3)
    stretched_bits = np.concatenate([
        np.zeros(cfg_large.k_root, dtype=np.uint8),
        np.ones(2 * cfg_large.k_root, dtype=np.uint8),
    ])
    stretched = _injected(small, cfg_large, lambda t, v: Bitstring.from_array(stretched_bits), 3,
                          root_length=cfg_large.k_root)
    results[PSEUDO_BLOCK_GAP] = check_pseudo_block_gap(exact, batches={small_k: exact, large_k: stretched}).passed

    return results
