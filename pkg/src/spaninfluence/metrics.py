"""Evaluation of explanation rankings: Sag, Lag, Ral, Spearman, K-sweeps and
the faithfulness experiment."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .influence import Explainer, InfluenceConfig, Ranking
from .model import Instance, Span, TextClassifier
from .seeding import substream
from .training import Checkpoint, DivergenceError, TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("dataset", "method", "metric", "K", "value", "seed", "runtime_s")
PERCENT_METRICS = frozenset({"sag", "lag", "ral", "ral_control"})


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    """One reported number.  ``value`` is on the natural scale ([-1, 1] for Sag,
    [0, 1] for Lag); CSV output uses the percent scale for the metrics in
    :data:`PERCENT_METRICS`.  Faithfulness rows are already on the percent
    scale."""

    metric: str
    K: int | float | None
    value: float
    method: str
    dataset: str = ""
    seed: int | None = None
    runtime_s: float | None = None
    valid: bool = True

    def __post_init__(self):
        v = self.value
        if self.valid and not math.isnan(v):
            if self.metric in ("sag",) and not -1 - 1e-9 <= v <= 1 + 1e-9:
                raise MetricError(f"sag out of range: {v}")
            if self.metric == "lag" and not -1e-12 <= v <= 1 + 1e-12:
                raise MetricError(f"lag out of range: {v}")

    def display_value(self) -> float:
        return 100.0 * self.value if self.metric in PERCENT_METRICS else self.value

    def to_row(self, *, with_runtime: bool = False) -> dict:
        return {
            "dataset": self.dataset,
            "method": self.method,
            "metric": self.metric,
            "K": "" if self.K is None else self.K,
            "value": "nan" if not self.valid else f"{self.display_value():.6g}",
            "seed": "" if self.seed is None else self.seed,
            "runtime_s": f"{self.runtime_s:.3f}" if with_runtime and self.runtime_s is not None else "",
        }


def reports_to_csv(reports: Iterable[MetricReport], header: Mapping | None = None, *, with_runtime: bool = False) -> str:
    buf = io.StringIO()
    if header:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.to_row(with_runtime=with_runtime))
    return buf.getvalue()


# ---------------------------------------------------------------------------------
# agreement metrics


def _cosine_rows(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(b)
    out = np.zeros(len(A))
    ok = (na > 0) & (nb > 0)
    out[ok] = (A[ok] @ b) / (na[ok] * nb)
    return np.clip(out, -1.0, 1.0)


def _check_k(K: int, ranking: Ranking) -> None:
    if not 1 <= K <= len(ranking):
        raise MetricError(f"K={K} outside 1..{len(ranking)}")


def entry_spans(ranking: Ranking, train_by_id: Mapping[str, Instance], K: int | None = None) -> list[tuple[Instance, Span]]:
    """Top-K ``(instance, span)`` pairs; span-free entries fall back to the instance's gold span."""
    out = []
    for e in ranking.entries[: K if K is not None else len(ranking)]:
        z = train_by_id[e.train_id]
        span = e.train_span if e.train_span is not None else z.gold_span
        if span is None:
            raise MetricError(f"no span for training instance {e.train_id!r}")
        out.append((z, span))
    return out


def sag(
    model: TextClassifier,
    theta,
    test: Instance,
    test_span: Span | None,
    ranking: Ranking,
    K: int,
    train_by_id: Mapping[str, Instance],
) -> float:
    """Mean cosine between the test span embedding and the top-K training span embeddings."""
    _check_k(K, ranking)
    if test_span is None:
        raise MetricError(f"no span for test instance {test.id!r}")
    pairs = entry_spans(ranking, train_by_id, K)
    t = model.span_embedding(theta, test, test_span)
    E = model.batch_span_embeddings(theta, [z for z, _ in pairs], [s for _, s in pairs])
    return float(np.mean(_cosine_rows(E, t)))


def lag(test: Instance, ranking: Ranking, K: int, train_by_id: Mapping[str, Instance]) -> float:
    """Fraction of the top-K training instances that share the test label."""
    _check_k(K, ranking)
    return float(np.mean([train_by_id[e.train_id].label == test.label for e in ranking.entries[:K]]))


class AgreementScorer:
    """Batched Sag/Lag over many rankings; embeds every training span once."""

    def __init__(self, model: TextClassifier, theta, train: Sequence[Instance]):
        self.model = model
        self.theta = np.asarray(theta)
        self.train = list(train)
        self.index = {z.id: i for i, z in enumerate(self.train)}
        self.labels = np.array([z.label for z in self.train])
        self._gold: np.ndarray | None = None

    def _gold_embeddings(self) -> np.ndarray:
        if self._gold is None:
            missing = [z.id for z in self.train if z.gold_span is None]
            if missing:
                raise MetricError(f"training instances without spans: {missing[:10]}")
            self._gold = self.model.batch_span_embeddings(self.theta, self.train, [z.gold_span for z in self.train])
        return self._gold

    def _entry_embeddings(self, ranking: Ranking, K: int) -> np.ndarray:
        gold = self._gold_embeddings()
        rows = []
        for e in ranking.entries[:K]:
            i = self.index[e.train_id]
            z = self.train[i]
            if e.train_span is None or e.train_span == z.gold_span:
                rows.append(gold[i])
            else:
                rows.append(self.model.span_embedding(self.theta, z, e.train_span))
        return np.stack(rows)

    def score(self, tests: Sequence[Instance], rankings: Sequence[Ranking], Ks: Sequence[int],
              test_spans: Sequence[Span | None] | None = None) -> dict[str, dict[int, float]]:
        """Mean Sag and Lag over test instances for each K."""
        if test_spans is None:
            test_spans = [r.test_span if r.test_span is not None else z.gold_span for z, r in zip(tests, rankings)]
        if any(s is None for s in test_spans):
            raise MetricError("every test instance needs a span for sag")
        T = self.model.batch_span_embeddings(self.theta, list(tests), list(test_spans))
        kmax = max(Ks)
        sag_tot = {K: 0.0 for K in Ks}
        lag_tot = {K: 0.0 for K in Ks}
        for z, r, t in zip(tests, rankings, T):
            _check_k(kmax, r)
            E = self._entry_embeddings(r, kmax)
            cos = _cosine_rows(E, t)
            same = np.array([self.labels[self.index[e.train_id]] == z.label for e in r.entries[:kmax]], dtype=float)
            for K in Ks:
                sag_tot[K] += float(np.mean(cos[:K]))
                lag_tot[K] += float(np.mean(same[:K]))
        n = max(1, len(tests))
        return {"sag": {K: v / n for K, v in sag_tot.items()}, "lag": {K: v / n for K, v in lag_tot.items()}}


# ---------------------------------------------------------------------------------
# rank correlation


def _score_vector(r, ids: Sequence[str]) -> np.ndarray:
    scores = r.scores() if isinstance(r, Ranking) else dict(r)
    return np.array([scores[i] for i in ids], dtype=np.float64)


def spearman(a, b) -> float:
    """Spearman correlation of two rankings (or id->score maps) over the same ids.

    Tied scores get average ranks.  Returns 0.0 when either side has no rank
    variance.
    """
    ids_a = set(a.ids() if isinstance(a, Ranking) else a)
    ids_b = set(b.ids() if isinstance(b, Ranking) else b)
    if ids_a != ids_b:
        raise MetricError(f"rankings cover different training ids ({len(ids_a ^ ids_b)} differ)")
    ids = sorted(ids_a)
    ra = rankdata(_score_vector(a, ids))
    rb = rankdata(_score_vector(b, ids))
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        return 0.0
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


# ---------------------------------------------------------------------------------
# retraining


@dataclass
class RalResult:
    fraction: float
    removed: list[str]
    base_accuracy: float
    retrained_accuracy: float
    value: float
    valid: bool = True
    control_value: float | None = None
    control_valid: bool = True
    note: str = ""


def aggregate_scores(rankings: Sequence[Ranking]) -> dict[str, float]:
    """Sum each training instance's score over all rankings."""
    total: dict[str, float] = {}
    for r in rankings:
        for e in r.entries:
            total[e.train_id] = total.get(e.train_id, 0.0) + e.score
    return total


def top_fraction(scores: Mapping[str, float], fraction: float) -> list[str]:
    if not 0.0 <= fraction <= 1.0:
        raise MetricError("fraction must lie in [0, 1]")
    k = int(round(fraction * len(scores)))
    order = sorted(scores, key=lambda i: (-scores[i], i))
    return order[:k]


def _retrain_accuracy(model, cfg: TrainConfig, data: Dataset, keep: list[Instance], tests) -> tuple[float, bool, str]:
    if not keep:
        return float("nan"), False, "nothing left to train on"
    try:
        res = train(cfg, data, model, train_instances=keep)
    except DivergenceError as exc:
        log.warning("retraining diverged: %s", exc)
        return float("nan"), False, str(exc)
    return model.accuracy(res.final.params, tests), True, ""


def ral(
    model: TextClassifier,
    final: Checkpoint,
    rankings: Sequence[Ranking],
    fraction: float,
    train_cfg: TrainConfig,
    data: Dataset,
    *,
    control: bool = True,
    tests: Sequence[Instance] | None = None,
) -> RalResult:
    """Test accuracy lost after removing the globally top-scored fraction and retraining.

    Retraining reuses ``train_cfg`` unchanged (same seed).  The control removes
    the same number of uniformly random training instances.
    """
    tests = list(data.test if tests is None else tests)
    base = model.accuracy(final.params, tests)
    removed = top_fraction(aggregate_scores(rankings), fraction)
    gone = set(removed)
    keep = [z for z in data.train if z.id not in gone]
    acc, ok, note = _retrain_accuracy(model, train_cfg, data, keep, tests)
    result = RalResult(fraction, removed, base, acc, base - acc if ok else float("nan"), ok, note=note)
    if control:
        rng = substream(train_cfg.seed, "control", int(round(fraction * 1000)))
        drop = set(rng.choice(len(data.train), size=len(removed), replace=False).tolist()) if removed else set()
        keep_c = [z for i, z in enumerate(data.train) if i not in drop]
        acc_c, ok_c, _ = _retrain_accuracy(model, train_cfg, data, keep_c, tests)
        result.control_value = base - acc_c if ok_c else float("nan")
        result.control_valid = ok_c
    return result


# ---------------------------------------------------------------------------------
# experiments


def evaluate_rankings(
    model: TextClassifier,
    theta,
    train: Sequence[Instance],
    tests: Sequence[Instance],
    rankings_by_method: Mapping[str, Sequence[Ranking]],
    Ks: Sequence[int],
    *,
    dataset: str = "",
    seed: int | None = None,
    runtimes: Mapping[str, float] | None = None,
) -> list[MetricReport]:
    """Sag and Lag for every method and K, as MetricReports."""
    scorer = AgreementScorer(model, theta, train)
    out = []
    for method, rankings in rankings_by_method.items():
        res = scorer.score(tests, rankings, Ks)
        rt = None if runtimes is None else runtimes.get(method)
        for metric in ("sag", "lag"):
            for K in Ks:
                out.append(MetricReport(metric, K, res[metric][K], method, dataset, seed, rt))
    return out


def k_sweep(
    explainer: Explainer,
    tests: Sequence[Instance],
    methods: Sequence[str],
    Ks: Sequence[int],
    *,
    dataset: str = "",
) -> list[MetricReport]:
    """Sag/Lag curves against K for each method."""
    if max(Ks) > len(explainer.train):
        raise MetricError(f"K={max(Ks)} exceeds the training set size {len(explainer.train)}")
    rankings, runtimes = {}, {}
    for m in methods:
        t0 = time.perf_counter()
        rankings[m] = explainer.explain_many(tests, method=m)
        runtimes[m] = time.perf_counter() - t0
    return evaluate_rankings(explainer.model, explainer.theta, explainer.train, tests, rankings, Ks,
                             dataset=dataset, seed=explainer.cfg.seed, runtimes=runtimes)


@dataclass
class FaithfulnessRow:
    method: str
    per_run: list[float]
    mean: float
    variance: float


@dataclass
class FaithfulnessTable:
    rows: dict[str, FaithfulnessRow]
    runs: int
    seed: int
    meta: dict = field(default_factory=dict)

    def reports(self, dataset: str = "") -> list[MetricReport]:
        out = []
        for m, r in self.rows.items():
            out.append(MetricReport("spearman_mean", None, r.mean, m, dataset, self.seed))
            out.append(MetricReport("spearman_var", None, r.variance, m, dataset, self.seed))
        return out


FAITHFULNESS_METHODS = ("tracin_plus_plus", "if_plus_plus", "control")


def faithfulness_experiment(
    model: TextClassifier,
    trained: TrainResult,
    data: Dataset,
    cfg: InfluenceConfig = InfluenceConfig(),
    *,
    runs: int = 5,
    seed: int = 0,
    tests: Sequence[Instance] | None = None,
    methods: Sequence[str] = FAITHFULNESS_METHODS,
    ground_truth: bool = False,
) -> FaithfulnessTable:
    """Agreement of span-pair rankings with a single-model ground truth.

    The ground truth is the span-pair gradient product at the final model
    alone.  Each run draws fresh one-step variants (``tracin_plus_plus``) and a
    fresh LiSSA sampling order (``if_plus_plus``); ``control`` sums over the
    saved epoch checkpoints.  Reported per method: mean and variance over runs
    of the per-run mean Spearman, both on the percent scale.
    """
    tests = list(data.test if tests is None else tests)
    spans = [z.gold_span for z in tests]
    base = Explainer(model, trained.final, data.train, cfg.replace(seed=seed, checkpoint_weights=None),
                     variants=[trained.final], extra_instances=data.all())
    truth = base.explain_many(tests, spans, method="tracin_plus_plus")

    def agreement(rankings: Sequence[Ranking]) -> float:
        return float(np.mean([spearman(r, t) for r, t in zip(rankings, truth)]))

    per_run: dict[str, list[float]] = {m: [] for m in methods}
    if ground_truth:
        per_run["ground_truth"] = []
    for run in range(runs):
        run_seed = int(substream(seed, "control", run).integers(0, 2**31 - 1))
        run_cfg = cfg.replace(seed=run_seed, checkpoint_weights=None)
        ex = Explainer(model, trained.final, data.train, run_cfg, epoch_checkpoints=trained.epochs,
                       extra_instances=data.all())
        for m in methods:
            if m == "tracin_plus_plus":
                rk = ex.explain_many(tests, spans, method="tracin_plus_plus")
            elif m == "if_plus_plus":
                rk = ex.explain_many(tests, spans, method="if_plus_plus")
            elif m == "control":
                ctrl = Explainer(model, trained.final, data.train, run_cfg, variants=trained.epochs,
                                 extra_instances=data.all())
                rk = ctrl.explain_many(tests, spans, method="tracin_plus_plus")
            else:
                raise MetricError(f"unknown faithfulness method {m!r}")
            per_run[m].append(100.0 * agreement(rk))
        if ground_truth:
            per_run["ground_truth"].append(100.0 * agreement(truth))
    rows = {
        m: FaithfulnessRow(m, v, float(np.mean(v)), float(np.var(v, ddof=1)) if len(v) > 1 else 0.0)
        for m, v in per_run.items()
    }
    return FaithfulnessTable(rows, runs, seed, {"tests": len(tests)})
