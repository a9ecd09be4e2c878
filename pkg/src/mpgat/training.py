"""Training loop, metrics, persistence baseline and multi-seed runs."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .stats import wilcoxon_rank_sum

log = logging.getLogger(__name__)

HORIZONS = (1, 3, 6, 12)
STEP_MINUTES = 5


class TrainingDivergence(RuntimeError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 15
    grad_clip_norm: float = 5.0
    seed: int = 0
    # cap on mini-batches per epoch (a fresh random subset each epoch); None = full pass
    steps_per_epoch: int | None = None
    time_budget: float | None = None  # seconds; stop after the epoch that crosses it
    loss: str = "mae"  # "mae" (normalised units) or "mape" (relative error on raw units)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("mae", "mape"):
            raise ValueError(f"loss must be 'mae' or 'mape', got {self.loss!r}")


@dataclass
class RunReport:
    seed: int
    mape: dict
    epochs: int = 0
    seconds: float = 0.0
    label: str = ""

    def to_json(self):
        doc = {"seed": self.seed, "mape": dict(self.mape), "epochs": self.epochs, "seconds": round(self.seconds, 3)}
        if self.label:
            doc["label"] = self.label
        return doc

    @classmethod
    def from_json(cls, doc):
        return cls(int(doc["seed"]), {k: float(v) for k, v in doc["mape"].items()},
                   int(doc.get("epochs", 0)), float(doc.get("seconds", 0.0)), doc.get("label", ""))


def horizon_key(h):
    return f"h{h}"


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------


def mae_loss(pred, target):
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return ad.mean(ad.abs_(pred - target))


def mape_loss(pred, target, normalizer):
    """Differentiable MAPE: ``pred`` in normalised units, ``target`` raw, zero targets masked."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    raw = pred * normalizer.std[:, None] + normalizer.mean[:, None]
    keep = target > 0
    weight = np.where(keep, 1.0 / np.where(keep, target, 1.0), 0.0) / max(int(keep.sum()), 1)
    return ad.sum_(ad.abs_(raw - target) * weight)


def mape(pred, target):
    """Mean of |y - y_hat| / y over elements with y > 0 (zero targets are masked)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    keep = target > 0
    if not keep.any():
        raise MetricError("MAPE undefined: every target is zero")
    return float(np.mean(np.abs(target[keep] - pred[keep]) / target[keep]))


def horizon_mape(pred, target, horizons=HORIZONS):
    """MAPE at single steps ``h`` (1-based) of (S, N, T_out) arrays."""
    if max(horizons) > target.shape[-1]:
        raise ValueError(f"horizon {max(horizons)} exceeds T_out={target.shape[-1]}")
    return {horizon_key(h): mape(pred[..., h - 1], target[..., h - 1]) for h in horizons}


def persistence_baseline(x, t_out):
    """Repeat the last observed X_q value for every horizon; x is raw (S, F, N, T_in)."""
    last = np.asarray(x)[:, 0, :, -1]
    return np.repeat(last[..., None], t_out, axis=-1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_mape: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mape: float = math.inf
    seconds: float = 0.0

    def to_json(self):
        return asdict(self)


def _prepare_inputs(x, n_features, normalizer):
    x = np.asarray(x)[:, :n_features]
    return np.ascontiguousarray(normalizer.normalize(x))


def predict_raw(model, x_raw, normalizer, batch_size=512):
    """Forecast in raw count units for raw multivariate inputs."""
    xn = _prepare_inputs(x_raw, model.cfg.n_features, normalizer)
    return normalizer.denormalize(model.predict(xn, batch_size))


def train(model, train_set, val_set, normalizer, cfg=None, progress=None):
    """Mini-batch Adam on MAE in normalised units with early stopping on validation MAPE.

    ``train_set`` / ``val_set`` are ``(x_raw, y_raw)`` arrays.  The model's
    parameters are replaced by the best-validation snapshot before returning.
    """
    cfg = cfg or TrainConfig()
    x_tr, y_tr = train_set
    x_va, y_va = val_set
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("train and validation splits must be non-empty")
    xn = _prepare_inputs(x_tr, model.cfg.n_features, normalizer)
    yn = normalizer.normalize(y_tr) if cfg.loss == "mae" else np.asarray(y_tr, dtype=np.float64)

    rng = np.random.default_rng(cfg.seed)
    opt = ad.Adam(model.params, lr=cfg.lr)
    hist = History()
    best = None
    stale = 0
    start = time.perf_counter()
    n_batches = math.ceil(len(xn) / cfg.batch_size)

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(xn))
        batches = np.array_split(order, n_batches)
        if cfg.steps_per_epoch is not None and cfg.steps_per_epoch < len(batches):
            batches = batches[: cfg.steps_per_epoch]
        losses = []
        for bi, idx in enumerate(batches):
            opt.zero_grad()
            pred = model.forward(xn[idx])
            if cfg.loss == "mae":
                loss = mae_loss(pred, yn[idx])
            else:
                loss = mape_loss(pred, yn[idx], normalizer)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch {bi}")
            ad.backward(loss)
            ad.clip_grad_norm(model.params.values(), cfg.grad_clip_norm)
            opt.step()
            losses.append(value)
        hist.train_loss.append(float(np.mean(losses)))

        val = mape(predict_raw(model, x_va, normalizer), y_va)
        hist.val_mape.append(val)
        if val < hist.best_val_mape:
            hist.best_val_mape, hist.best_epoch = val, epoch
            best = {k: p.data.copy() for k, p in model.params.items()}
            stale = 0
        else:
            stale += 1
        if progress:
            progress(epoch, hist.train_loss[-1], val)
        log.info("epoch %d loss %.5f val_mape %.5f", epoch, hist.train_loss[-1], val)
        if stale >= cfg.patience:
            break
        if cfg.time_budget is not None and time.perf_counter() - start > cfg.time_budget:
            break

    for k, arr in best.items():
        model.params[k].data[...] = arr
    hist.seconds = time.perf_counter() - start
    return model, hist


def evaluate(model, test_set, normalizer, horizons=HORIZONS, seed=0):
    """Per-horizon MAPE on denormalised predictions over the whole test split.

    Only the inputs and targets of ``test_set`` are read.
    """
    x, y = test_set
    pred = predict_raw(model, x, normalizer)
    return RunReport(seed, horizon_mape(pred, y, horizons))


def evaluate_persistence(test_set, horizons=HORIZONS, seed=0):
    x, y = test_set
    return RunReport(seed, horizon_mape(persistence_baseline(x, y.shape[-1]), y, horizons), label="persistence")


# ---------------------------------------------------------------------------
# multiple seeds
# ---------------------------------------------------------------------------


def multi_run(run_fn, n_runs=30, seed0=0, workers=1, min_completed=None):
    """Call ``run_fn(seed)`` for seeds seed0..seed0+n_runs-1 and collect RunReports.

    Runs that diverge are dropped with a warning; fewer than ``min_completed``
    survivors (default ``max(2, n_runs - 5)``) raises.
    """
    if n_runs < 2:
        raise ValueError("multi_run needs at least two runs")
    if min_completed is None:
        min_completed = max(2, n_runs - 5)
    seeds = list(range(seed0, seed0 + n_runs))
    reports = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(s, pool.submit(run_fn, s)) for s in seeds]
            results = [(s, _result(f)) for s, f in futures]
    else:
        results = [(s, _call(run_fn, s)) for s in seeds]
    for seed, res in results:
        if isinstance(res, TrainingDivergence):
            log.warning("run with seed %d diverged and is excluded: %s", seed, res)
            continue
        reports.append(res)
    if len(reports) < min_completed:
        raise RuntimeError(f"only {len(reports)} of {n_runs} runs completed (need {min_completed})")
    return reports


def _call(fn, seed):
    try:
        return fn(seed)
    except TrainingDivergence as exc:
        return exc


def _result(future):
    try:
        return future.result()
    except TrainingDivergence as exc:
        return exc


def summarize(reports, horizons=None):
    """{horizon_key: (mean, sample std)} across reports."""
    keys = [horizon_key(h) for h in horizons] if horizons else list(reports[0].mape)
    out = {}
    for k in keys:
        vals = np.array([r.mape[k] for r in reports])
        out[k] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


def format_mean_std(mean, std):
    return f"{mean:.4f}±{std:.4f}"


def compare_reports(proposed, reference, alpha=0.05):
    """Per-horizon rows: mean±std of both sides plus the rank-sum decision."""
    keys = list(proposed[0].mape)
    if set(keys) != set(reference[0].mape):
        raise ValueError(f"horizon sets differ: {sorted(keys)} vs {sorted(reference[0].mape)}")
    for r in proposed + reference:
        if set(r.mape) != set(keys):
            raise ValueError(f"report for seed {r.seed} has horizons {sorted(r.mape)}")
    sa, sb = summarize(proposed), summarize(reference)
    rows = []
    for k in keys:
        res = wilcoxon_rank_sum([r.mape[k] for r in proposed], [r.mape[k] for r in reference], alpha)
        rows.append({
            "horizon": k,
            "minutes": int(k[1:]) * STEP_MINUTES,
            "proposed": format_mean_std(*sa[k]),
            "reference": format_mean_std(*sb[k]),
            "h": res.h,
            "p_value": res.p_value,
        })
    return rows
